//! Trace files: JSON lines, one self-describing record per line.
//!
//! Line 1 is the config record:
//!
//! ```text
//! {"record":"config","name":..,"num_layers":..,"num_routed":..,"num_shared":..,
//!  "num_activated":..,"routed_expert_dims":[h,i],"shared_expert_dims":[h,i]|null,
//!  "bytes_per_weight":..,"metadata":{..}}
//! ```
//!
//! Every further line is one layer of one pass, passes and layers in order:
//!
//! ```text
//! {"record":"layer","pass":..,"stage":"prefill"|"decode","token_count":..,
//!  "layer":..,"loads":[..],"scores":[..]}
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    validate_trace, ForwardPass, LayerRequest, ModelConfig, Stage, Trace, Violation,
};

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {}{message}", field.as_ref().map(|f| format!("field `{f}`: ")).unwrap_or_default())]
    Parse {
        line: usize,
        field: Option<String>,
        message: String,
    },
    #[error("trace fails validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl TraceIoError {
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceIoError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    record: &'static str,
    name: &'a str,
    num_layers: usize,
    num_routed: usize,
    num_shared: usize,
    num_activated: usize,
    routed_expert_dims: (usize, usize),
    shared_expert_dims: Option<(usize, usize)>,
    bytes_per_weight: f64,
    metadata: &'a BTreeMap<String, String>,
}

#[derive(Serialize)]
struct LayerRecord<'a> {
    record: &'static str,
    pass: usize,
    stage: Stage,
    token_count: u32,
    layer: usize,
    loads: &'a [u32],
    scores: &'a [f64],
}

pub fn write_trace(trace: &Trace, mut out: impl Write) -> io::Result<()> {
    let c = &trace.config;
    let header = ConfigRecord {
        record: "config",
        name: &c.name,
        num_layers: c.num_layers,
        num_routed: c.num_routed,
        num_shared: c.num_shared,
        num_activated: c.num_activated,
        routed_expert_dims: c.routed_expert_dims,
        shared_expert_dims: c.shared_expert_dims,
        bytes_per_weight: c.bytes_per_weight,
        metadata: &trace.metadata,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (p, pass) in trace.passes.iter().enumerate() {
        for req in &pass.layers {
            let rec = LayerRecord {
                record: "layer",
                pass: p,
                stage: pass.stage,
                token_count: pass.token_count,
                layer: req.layer,
                loads: &req.loads,
                scores: &req.scores,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn trace_to_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("json output is utf-8")
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceIoError> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceIoError> {
    parse_trace(&fs::read_to_string(path)?)
}

struct Line {
    number: usize,
    obj: Map<String, Value>,
}

impl Line {
    fn error(&self, field: Option<&str>, message: impl Into<String>) -> TraceIoError {
        TraceIoError::Parse {
            line: self.number,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn field<T: DeserializeOwned>(&self, name: &str) -> Result<T, TraceIoError> {
        let value = self
            .obj
            .get(name)
            .ok_or_else(|| self.error(Some(name), "missing"))?;
        serde_json::from_value(value.clone()).map_err(|e| self.error(Some(name), e.to_string()))
    }
}

/// Parses a trace and validates it. Structural problems are reported with
/// the offending line; invariant violations come back as a report.
pub fn parse_trace(text: &str) -> Result<Trace, TraceIoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let number = i + 1;
            match serde_json::from_str::<Value>(l) {
                Ok(Value::Object(obj)) => Ok(Line { number, obj }),
                Ok(_) => Err(TraceIoError::Parse {
                    line: number,
                    field: None,
                    message: "expected a JSON object".into(),
                }),
                Err(e) => Err(TraceIoError::Parse {
                    line: number,
                    field: None,
                    message: format!("malformed record: {e}"),
                }),
            }
        });

    let head = lines.next().ok_or_else(|| TraceIoError::Parse {
        line: 1,
        field: None,
        message: "empty trace file".into(),
    })??;
    if head.field::<String>("record")? != "config" {
        return Err(head.error(Some("record"), "first record must be the config"));
    }
    let config = ModelConfig {
        name: head.field("name")?,
        num_layers: head.field("num_layers")?,
        num_routed: head.field("num_routed")?,
        num_shared: head.field("num_shared")?,
        num_activated: head.field("num_activated")?,
        routed_expert_dims: head.field("routed_expert_dims")?,
        shared_expert_dims: head.field("shared_expert_dims")?,
        bytes_per_weight: head.field("bytes_per_weight")?,
    };
    let metadata: BTreeMap<String, String> = match head.obj.get("metadata") {
        Some(_) => head.field("metadata")?,
        None => BTreeMap::new(),
    };

    let mut passes: Vec<ForwardPass> = Vec::new();
    let mut last_line = head.number;
    for line in lines {
        let line = line?;
        if line.field::<String>("record")? != "layer" {
            return Err(line.error(Some("record"), "expected a layer record"));
        }
        let pass: usize = line.field("pass")?;
        let stage: Stage = line.field("stage")?;
        let token_count: u32 = line.field("token_count")?;
        let layer: usize = line.field("layer")?;
        let loads: Vec<u32> = line.field("loads")?;
        let scores: Vec<f64> = line.field("scores")?;

        if pass == passes.len() {
            if let Some(prev) = passes.last() {
                check_complete(prev, passes.len() - 1, &config, last_line)?;
            }
            passes.push(ForwardPass {
                stage,
                token_count,
                layers: Vec::new(),
            });
        } else if pass + 1 != passes.len() {
            return Err(line.error(
                Some("pass"),
                format!("pass {pass} out of order (expected {})", passes.len()),
            ));
        }
        let current = passes.last_mut().expect("a pass was just ensured");
        if current.stage != stage || current.token_count != token_count {
            return Err(line.error(Some("stage"), "stage or token_count changes within a pass"));
        }
        if layer != current.layers.len() {
            return Err(line.error(
                Some("layer"),
                format!(
                    "layer {layer} out of order (expected {})",
                    current.layers.len()
                ),
            ));
        }
        current.layers.push(LayerRequest::new(layer, loads, scores));
        last_line = line.number;
    }
    if let Some(prev) = passes.last() {
        check_complete(prev, passes.len() - 1, &config, last_line)?;
    }

    let trace = Trace {
        config,
        passes,
        metadata,
    };
    let violations = validate_trace(&trace);
    if violations.is_empty() {
        Ok(trace)
    } else {
        Err(TraceIoError::Invalid(violations))
    }
}

fn check_complete(
    pass: &ForwardPass,
    index: usize,
    config: &ModelConfig,
    line: usize,
) -> Result<(), TraceIoError> {
    if pass.layers.len() == config.num_layers {
        return Ok(());
    }
    Err(TraceIoError::Parse {
        line,
        field: None,
        message: format!(
            "pass {index} ends after {} of {} layers",
            pass.layers.len(),
            config.num_layers
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Rule;
    use crate::tracegen::{generate_trace, GenParams};

    fn sample() -> Trace {
        let cfg = ModelConfig::deepseek();
        generate_trace(&cfg, &GenParams::calibrated(&cfg, 11), 16, 4).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        for cfg in ModelConfig::presets() {
            let t = generate_trace(&cfg, &GenParams::calibrated(&cfg, 2), 24, 3).unwrap();
            let text = trace_to_string(&t);
            assert_eq!(parse_trace(&text).unwrap(), t);
            assert_eq!(trace_to_string(&parse_trace(&text).unwrap()), text);
        }
    }

    #[test]
    fn first_line_describes_the_model() {
        let text = trace_to_string(&sample());
        let head: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(head["record"], "config");
        assert_eq!(head["num_layers"], 26);
        assert_eq!(head["num_routed"], 64);
        assert_eq!(head["metadata"]["seed"], "11");
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let t = sample();
        let text = format!("# generated for a test\n\n{}", trace_to_string(&t));
        assert_eq!(parse_trace(&text).unwrap(), t);
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let text = trace_to_string(&sample());
        let cut = text.len() - 40;
        let err = parse_trace(&text[..cut]).unwrap_err();
        assert_eq!(err.line(), Some(text[..cut].lines().count()));
    }

    #[test]
    fn truncated_pass_reports_last_line() {
        let text = trace_to_string(&sample());
        let kept: Vec<&str> = text.lines().take(10).collect();
        let err = parse_trace(&kept.join("\n")).unwrap_err();
        assert_eq!(err.line(), Some(10));
        assert!(err.to_string().contains("9 of 26"), "{err}");
    }

    #[test]
    fn bad_field_is_named() {
        let text = trace_to_string(&sample());
        let broken = text.replacen("\"loads\":[", "\"loads\":[\"x\",", 1);
        match parse_trace(&broken).unwrap_err() {
            TraceIoError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field.as_deref(), Some("loads"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_disagreeing_with_records_is_invalid() {
        let text = trace_to_string(&sample()).replacen("\"num_routed\":64", "\"num_routed\":60", 1);
        match parse_trace(&text).unwrap_err() {
            TraceIoError::Invalid(v) => assert!(v.iter().any(|v| v.rule == Rule::LoadsLength)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn save_and_load_files() {
        let dir = std::env::temp_dir().join(format!("moesim-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        let t = sample();
        save_trace(&t, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), t);
        fs::remove_dir_all(&dir).unwrap();
    }
}
