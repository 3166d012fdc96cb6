//! JSON-lines instance and advice files.
//!
//! An instance file starts with a header object
//! `{"B": int, "K": int, "theta": [..], "quotas": [..]?}` followed by one
//! `{"v": real, "labels": [ints]}` object per agent in arrival order. Class
//! indices are 1-based. Advice files hold one `{"x": 0|1}` object per agent.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{OmcsError, Result};
use crate::model::{Agent, GfqSpec, Instance, LabelSet, ProblemParams};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "B")]
    budget: usize,
    #[serde(rename = "K")]
    num_classes: usize,
    theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quotas: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    v: f64,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdviceRecord {
    x: u8,
}

/// An instance file's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFile {
    pub instance: Instance,
    pub quotas: Option<GfqSpec>,
}

fn parse_err(line: usize, reason: impl ToString) -> OmcsError {
    OmcsError::Parse {
        line,
        reason: reason.to_string(),
    }
}

/// Reads an instance from JSON lines. Blank lines are skipped.
pub fn read_instance<R: BufRead>(reader: R) -> Result<InstanceFile> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));

    let (hline, header) = match lines.next() {
        Some((n, l)) => (n, l?),
        None => return Err(parse_err(1, "missing header line")),
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| parse_err(hline, e))?;
    if header.theta.len() != header.num_classes {
        return Err(parse_err(
            hline,
            format!(
                "K = {} but theta has {} entries",
                header.num_classes,
                header.theta.len()
            ),
        ));
    }
    let params = ProblemParams::new(header.budget, header.theta)?;
    let quotas = header.quotas.map(GfqSpec::new);
    if let Some(q) = &quotas {
        q.validate(&params)?;
    }

    let mut agents = Vec::new();
    for (line, text) in lines {
        let text = text?;
        let rec: AgentRecord = serde_json::from_str(&text).map_err(|e| parse_err(line, e))?;
        let index = agents.len();
        let mut bits = 0u64;
        for &l in &rec.labels {
            if l == 0 || l > params.num_classes {
                return Err(OmcsError::InvalidAgent {
                    index,
                    reason: format!("unknown class index {l} (K = {})", params.num_classes),
                });
            }
            if bits & (1 << (l - 1)) != 0 {
                return Err(OmcsError::InvalidAgent {
                    index,
                    reason: format!("duplicate class index {l}"),
                });
            }
            bits |= 1 << (l - 1);
        }
        let agent = Agent::new(rec.v, LabelSet::from_bits(bits));
        agent
            .validate(&params)
            .map_err(|reason| OmcsError::InvalidAgent { index, reason })?;
        agents.push(agent);
    }
    Ok(InstanceFile {
        instance: Instance { params, agents },
        quotas,
    })
}

/// Writes an instance (and optional quotas) as JSON lines.
pub fn write_instance<W: Write>(
    mut writer: W,
    instance: &Instance,
    quotas: Option<&GfqSpec>,
) -> Result<()> {
    let header = Header {
        budget: instance.params.budget,
        num_classes: instance.params.num_classes,
        theta: instance.params.theta.clone(),
        quotas: quotas.map(|q| q.quotas.clone()),
    };
    writeln!(writer, "{}", serde_json::to_string(&header).expect("header"))?;
    for a in &instance.agents {
        let rec = AgentRecord {
            v: a.value,
            labels: a.labels.iter().map(|c| c + 1).collect(),
        };
        writeln!(writer, "{}", serde_json::to_string(&rec).expect("agent"))?;
    }
    Ok(())
}

/// Reads an external advice stream.
pub fn read_advice<R: BufRead>(reader: R) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AdviceRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?;
        match rec.x {
            0 => out.push(false),
            1 => out.push(true),
            other => return Err(parse_err(i + 1, format!("advice must be 0 or 1, got {other}"))),
        }
    }
    Ok(out)
}

pub fn write_advice<W: Write>(mut writer: W, advice: &[bool]) -> Result<()> {
    for &x in advice {
        writeln!(writer, "{{\"x\":{}}}", u8::from(x))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_single_record() {
        let text = "{\"B\":5,\"K\":3,\"theta\":[2,4,8]}\n{\"v\":2.0,\"labels\":[1,3]}\n";
        let f = read_instance(text.as_bytes()).unwrap();
        assert_eq!(f.instance.agents.len(), 1);
        assert_eq!(f.instance.agents[0].value, 2.0);
        assert_eq!(
            f.instance.agents[0].labels,
            LabelSet::from_classes([0, 2])
        );
        assert!(f.quotas.is_none());
    }

    #[test]
    fn value_above_theta_names_record() {
        let text = "{\"B\":5,\"K\":1,\"theta\":[5]}\n{\"v\":2.0,\"labels\":[1]}\n{\"v\":10.0,\"labels\":[1]}\n";
        match read_instance(text.as_bytes()) {
            Err(OmcsError::InvalidAgent { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_duplicate_classes_are_rejected() {
        let text = "{\"B\":5,\"K\":2,\"theta\":[5,5]}\n{\"v\":2.0,\"labels\":[3]}\n";
        assert!(matches!(
            read_instance(text.as_bytes()),
            Err(OmcsError::InvalidAgent { index: 0, .. })
        ));
        let text = "{\"B\":5,\"K\":2,\"theta\":[5,5]}\n{\"v\":2.0,\"labels\":[1,1]}\n";
        assert!(read_instance(text.as_bytes()).is_err());
        let text = "{\"B\":5,\"K\":2,\"theta\":[5,5]}\n{\"v\":2.0,\"labels\":[]}\n";
        assert!(read_instance(text.as_bytes()).is_err());
    }

    #[test]
    fn empty_stream_is_valid() {
        let text = "{\"B\":5,\"K\":1,\"theta\":[5],\"quotas\":[2]}\n";
        let f = read_instance(text.as_bytes()).unwrap();
        assert!(f.instance.agents.is_empty());
        assert_eq!(f.quotas, Some(GfqSpec::new(vec![2])));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert!(matches!(
            read_instance("".as_bytes()),
            Err(OmcsError::Parse { line: 1, .. })
        ));
        let text = "{\"B\":5,\"K\":1,\"theta\":[5]}\nnot json\n";
        assert!(matches!(
            read_instance(text.as_bytes()),
            Err(OmcsError::Parse { line: 2, .. })
        ));
        let text = "{\"B\":5,\"K\":2,\"theta\":[5]}\n";
        assert!(read_instance(text.as_bytes()).is_err());
    }

    #[test]
    fn round_trip() {
        let params = ProblemParams::new(3, vec![2.0, 7.5]).unwrap();
        let agents = vec![
            Agent::new(1.0 + 1.0 / 3.0, LabelSet::from_classes([0, 1])),
            Agent::new(7.5, LabelSet::single(1)),
        ];
        let inst = Instance::new(params, agents).unwrap();
        let spec = GfqSpec::new(vec![1, 1]);
        let mut buf = Vec::new();
        write_instance(&mut buf, &inst, Some(&spec)).unwrap();
        let back = read_instance(buf.as_slice()).unwrap();
        assert_eq!(back.instance, inst);
        assert_eq!(back.quotas, Some(spec));
    }

    #[test]
    fn advice_round_trip() {
        let adv = vec![true, false, true];
        let mut buf = Vec::new();
        write_advice(&mut buf, &adv).unwrap();
        assert_eq!(read_advice(buf.as_slice()).unwrap(), adv);
        assert!(read_advice("{\"x\":2}\n".as_bytes()).is_err());
    }
}
