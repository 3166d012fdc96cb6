use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] omcs::OmcsError),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown policy id `{0}`")]
    UnknownPolicy(String),

    #[error("{} unmappable trace rows: {}", .0.len(), render_rows(.0))]
    BadRows(Vec<(usize, String)>),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn render_rows(rows: &[(usize, String)]) -> String {
    rows.iter()
        .take(10)
        .map(|(i, r)| format!("row {i}: {r}"))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, HarnessError>;
