//! Line-oriented text formats: schedule files, trace files, and the JSON
//! trace the renderer consumes.
//!
//! Schedule lines are tab-separated, one operator per line, `-` for absent
//! fields. Compute and FSDP ops use six columns:
//! `rank  index  kind  microbatch  chunk  unit`
//! Communication ops append `peer` and `bytes`, with the payload folded into
//! the kind token as `kind:payload`. Header comments carry the pipeline
//! configuration so a file round-trips byte-identically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    ModalityLayout, ModulePlacement, Operator, OperatorKind, PayloadKind, PipelineConfig, Schedule,
};
use crate::sim::Timeline;

fn field(value: Option<usize>) -> String {
    value.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn parse_field(tok: &str, line: usize) -> Result<Option<usize>> {
    if tok == "-" {
        return Ok(None);
    }
    tok.parse::<usize>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("expected integer or `-`, got `{tok}`"),
    })
}

/// Serializes a schedule to the canonical text format.
pub fn serialize_schedule(schedule: &Schedule) -> String {
    let c = &schedule.config;
    let p = &schedule.placement;
    let mut out = String::new();
    out.push_str("# nestpipe schedule v1\n");
    out.push_str(&format!(
        "# pipeline ranks={} microbatches={} virtual_chunks={} warmup_units={} llm_cp={} enc_cp={}\n",
        c.ranks, c.microbatches, c.virtual_chunks, c.warmup_units, c.llm_cp, c.enc_cp
    ));
    out.push_str(&format!(
        "# placement encoder_dp={} generator_dp={} generator={} modality={}\n",
        p.encoder_dp,
        p.generator_dp,
        p.has_generator,
        schedule.modality.token()
    ));
    for (rank, ops) in schedule.per_rank.iter().enumerate() {
        for (idx, op) in ops.iter().enumerate() {
            let kind_tok = match op.payload {
                Some(payload) if op.kind.is_comm() => {
                    format!("{}:{}", op.kind.token(), payload.token())
                }
                _ => op.kind.token().to_string(),
            };
            out.push_str(&format!(
                "{rank}\t{idx}\t{kind_tok}\t{}\t{}\t{}",
                field(op.microbatch),
                field(op.chunk),
                field(op.unit)
            ));
            if op.kind.is_comm() {
                out.push_str(&format!(
                    "\t{}\t{}",
                    field(op.peer),
                    op.bytes.map_or_else(|| "-".to_string(), |b| b.to_string())
                ));
            }
            out.push('\n');
        }
    }
    out
}

fn parse_header_kv(line: &str, lineno: usize) -> Result<std::collections::HashMap<String, String>> {
    let mut map = std::collections::HashMap::new();
    for tok in line.split_whitespace().skip(2) {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("malformed header field `{tok}`"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn header_usize(
    map: &std::collections::HashMap<String, String>,
    key: &str,
    line: usize,
) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("missing header field `{key}`"),
        })?
        .parse()
        .map_err(|_| Error::Parse {
            line,
            message: format!("header field `{key}` is not an integer"),
        })
}

/// Parses the canonical schedule text format.
pub fn parse_schedule(text: &str) -> Result<Schedule> {
    let mut config: Option<PipelineConfig> = None;
    let mut placement: Option<ModulePlacement> = None;
    let mut modality = ModalityLayout::None;
    let mut per_rank: Vec<Vec<Operator>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if rest.starts_with("pipeline ") {
                let kv = parse_header_kv(line, lineno)?;
                config = Some(PipelineConfig {
                    ranks: header_usize(&kv, "ranks", lineno)?,
                    microbatches: header_usize(&kv, "microbatches", lineno)?,
                    virtual_chunks: header_usize(&kv, "virtual_chunks", lineno)?,
                    warmup_units: header_usize(&kv, "warmup_units", lineno)?,
                    llm_cp: header_usize(&kv, "llm_cp", lineno)?,
                    enc_cp: header_usize(&kv, "enc_cp", lineno)?,
                });
            } else if rest.starts_with("placement ") {
                let kv = parse_header_kv(line, lineno)?;
                placement = Some(ModulePlacement {
                    encoder_dp: header_usize(&kv, "encoder_dp", lineno)?,
                    generator_dp: header_usize(&kv, "generator_dp", lineno)?,
                    has_generator: kv.get("generator").map(String::as_str) == Some("true"),
                });
                if let Some(m) = kv.get("modality") {
                    modality = ModalityLayout::from_token(m).ok_or_else(|| Error::Parse {
                        line: lineno,
                        message: format!("unknown modality layout `{m}`"),
                    })?;
                }
            }
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 && cols.len() != 8 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 6 or 8 tab-separated columns, got {}", cols.len()),
            });
        }
        let rank: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "rank is not an integer".into(),
        })?;
        let idx: usize = cols[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "index is not an integer".into(),
        })?;
        let (kind_tok, payload) = match cols[2].split_once(':') {
            Some((k, p)) => {
                let payload = PayloadKind::from_token(p).ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("unknown payload `{p}`"),
                })?;
                (k, Some(payload))
            }
            None => (cols[2], None),
        };
        let kind = OperatorKind::from_token(kind_tok).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("unknown operator kind `{kind_tok}`"),
        })?;
        let microbatch = parse_field(cols[3], lineno)?;
        let chunk = parse_field(cols[4], lineno)?;
        let unit = parse_field(cols[5], lineno)?;
        let (peer, bytes) = if cols.len() == 8 {
            let peer = parse_field(cols[6], lineno)?;
            let bytes = if cols[7] == "-" {
                None
            } else {
                Some(cols[7].parse::<u64>().map_err(|_| Error::Parse {
                    line: lineno,
                    message: "bytes is not an integer".into(),
                })?)
            };
            (peer, bytes)
        } else {
            (None, None)
        };

        while per_rank.len() <= rank {
            per_rank.push(Vec::new());
        }
        if per_rank[rank].len() != idx {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "rank {rank} expects index {}, got {idx}",
                    per_rank[rank].len()
                ),
            });
        }
        per_rank[rank].push(Operator {
            id: 0,
            kind,
            rank,
            microbatch,
            chunk,
            unit,
            peer,
            bytes,
            payload,
        });
    }

    let config = config.ok_or(Error::Parse {
        line: 0,
        message: "missing `# pipeline` header".into(),
    })?;
    config.validate()?;
    let placement = placement.unwrap_or_else(|| ModulePlacement::llm_only(&config));
    while per_rank.len() < config.ranks {
        per_rank.push(Vec::new());
    }
    let mut schedule = Schedule::new(config, placement, modality, per_rank);
    schedule.assign_ids();
    schedule.check_well_formed()?;
    Ok(schedule)
}

/// Plain text trace: `rank  op_id  kind  start  end`, one event per line.
pub fn serialize_trace_text(timeline: &Timeline) -> String {
    let mut out = String::new();
    for ops in &timeline.per_rank {
        for t in ops {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.op.rank,
                t.op.id,
                t.op.kind.token(),
                t.start,
                t.end
            ));
        }
    }
    out
}

/// Structured trace event for the renderer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub rank: usize,
    pub op_id: usize,
    pub kind: String,
    pub microbatch: Option<usize>,
    pub chunk: Option<usize>,
    pub unit: Option<usize>,
    pub comm: bool,
    pub start: f64,
    pub end: f64,
}

/// Structured trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    pub ranks: usize,
    pub iteration_time: f64,
    pub events: Vec<TraceEvent>,
}

pub fn trace_file(timeline: &Timeline) -> TraceFile {
    let mut events = Vec::new();
    for ops in &timeline.per_rank {
        for t in ops {
            events.push(TraceEvent {
                rank: t.op.rank,
                op_id: t.op.id,
                kind: t.op.kind.token().to_string(),
                microbatch: t.op.microbatch,
                chunk: t.op.chunk,
                unit: t.op.unit,
                comm: !t.op.kind.is_compute(),
                start: t.start,
                end: t.end,
            });
        }
    }
    TraceFile {
        ranks: timeline.per_rank.len(),
        iteration_time: timeline.iteration_time,
        events,
    }
}

pub fn serialize_trace_json(timeline: &Timeline) -> Result<String> {
    serde_json::to_string_pretty(&trace_file(timeline)).map_err(|e| Error::Parse {
        line: 0,
        message: format!("trace serialization failed: {e}"),
    })
}

pub fn parse_trace_json(text: &str) -> Result<TraceFile> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: 0,
        message: format!("trace parse failed: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{insert_comm_ops, PayloadBytes};
    use crate::nesting::build_strategy;
    use crate::ops::Strategy;

    #[test]
    fn schedule_roundtrip_is_byte_identical() {
        let config = PipelineConfig::new(4, 16, 2, 3);
        let placement = ModulePlacement::full(&config, true);
        let s = build_strategy(Strategy::BigMac, config, placement).unwrap();
        let wired = insert_comm_ops(&s, &PayloadBytes::default()).unwrap();
        for schedule in [&s, &wired] {
            let text = serialize_schedule(schedule);
            let parsed = parse_schedule(&text).unwrap();
            assert_eq!(serialize_schedule(&parsed), text);
        }
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_schedule("# nestpipe schedule v1\n# pipeline ranks=1 microbatches=1 virtual_chunks=1 warmup_units=1 llm_cp=1 enc_cp=1\n0\t0\tbogus\t0\t0\t-\n")
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn degenerate_header_is_rejected() {
        let text =
            "# pipeline ranks=0 microbatches=1 virtual_chunks=1 warmup_units=1 llm_cp=1 enc_cp=1\n";
        assert!(parse_schedule(text).is_err());
    }

    #[test]
    fn parsed_schedule_matches_original_structure() {
        let config = PipelineConfig::new(2, 4, 1, 2);
        let placement = ModulePlacement::full(&config, false);
        let s = build_strategy(Strategy::ComputeEfficient, config, placement).unwrap();
        let parsed = parse_schedule(&serialize_schedule(&s)).unwrap();
        assert_eq!(parsed, s);
    }
}
