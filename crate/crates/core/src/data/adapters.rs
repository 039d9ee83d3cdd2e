//! Source adapters: small per-dataset fixture schemas mapped onto
//! [`UnifiedClip`]. Schemas are documented in `docs/adapters.md`.

use std::path::Path;

use serde_json::Value;

use super::clip::{EgoState, SourceTag, UnifiedClip, COORD_DIMS};
use crate::error::{contract_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    /// Rows kept in `actions`.
    pub horizon: usize,
    /// Keep a leading `(0, 0)` row as the first of the `horizon` rows
    /// instead of dropping it.
    pub include_origin_row: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            horizon: 10,
            include_origin_row: false,
        }
    }
}

/// Source record before normalization.
#[derive(Debug, Default)]
struct RawRecord {
    id: String,
    history: Vec<[f64; 7]>,
    future: Vec<[f64; 2]>,
    /// The source's future list starts with the current pose.
    leading_origin: bool,
    reasoning: Option<String>,
    cameras: Vec<String>,
}

/// Parses one fixture file; invalid records are dropped and logged.
pub fn ingest_adapter(source: SourceTag, path: &Path, opts: &IngestOptions) -> Result<Vec<UnifiedClip>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = match source {
        SourceTag::Navsim => json_lines(&text, navsim),
        SourceTag::Nuscenes => json_lines(&text, nuscenes),
        SourceTag::Waymo => json_lines(&text, waymo),
        SourceTag::Argoverse2 => argoverse2(&text),
        SourceTag::Kitti => kitti(&text),
        SourceTag::Mapillary => json_lines(&text, mapillary),
        SourceTag::Once => json_lines(&text, once),
        SourceTag::Idd => idd(&text),
        SourceTag::Synthetic => {
            return Err(contract_err!("synthetic clips are generated, not ingested"))
        }
    };

    let mut clips = Vec::new();
    for rec in records {
        let rec = match rec {
            Ok(r) => r,
            Err(reason) => {
                log::warn!("{source} {}: dropped malformed record: {reason}", path.display());
                continue;
            }
        };
        let clip = normalize(source, rec, opts);
        match clip.validate(opts.horizon) {
            Ok(()) => clips.push(clip),
            Err(reason) => log::warn!("{source} clip {}: dropped: {reason}", clip.clip_id),
        }
    }
    if clips.is_empty() {
        log::warn!("{source} {}: no valid clips ingested", path.display());
    }
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(clips)
}

fn normalize(source: SourceTag, rec: RawRecord, opts: &IngestOptions) -> UnifiedClip {
    let mut future = rec.future;
    if rec.leading_origin && !future.is_empty() {
        future.remove(0);
    }
    let actions = if opts.include_origin_row {
        let mut a = vec![[0.0, 0.0]];
        a.extend(future.into_iter().take(opts.horizon.saturating_sub(1)));
        a
    } else {
        future
    };
    UnifiedClip {
        clip_id: format!("{}_{}", source.as_str(), rec.id),
        source,
        history: rec.history.into_iter().map(EgoState::from_values).collect(),
        actions,
        reasoning_text: rec.reasoning,
        camera_refs: (!rec.cameras.is_empty()).then_some(rec.cameras),
    }
}

type Parsed = std::result::Result<RawRecord, String>;

fn json_lines(text: &str, parse: fn(&Value) -> Parsed) -> Vec<Parsed> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            serde_json::from_str::<Value>(l)
                .map_err(|e| e.to_string())
                .and_then(|v| parse(&v))
        })
        .collect()
}

/// Number, `null`, or a numeric string; anything unusable becomes NaN so
/// the finiteness rule rejects the record.
fn num(v: &Value) -> f64 {
    match v {
        Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
        Value::String(s) => s.trim().parse().unwrap_or(f64::NAN),
        _ => f64::NAN,
    }
}

fn field<'a>(v: &'a Value, key: &str) -> std::result::Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("missing field {key:?}"))
}

fn array<'a>(v: &'a Value, key: &str) -> std::result::Result<&'a Vec<Value>, String> {
    field(v, key)?
        .as_array()
        .ok_or_else(|| format!("field {key:?} is not an array"))
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn fixed<const N: usize>(v: &Value) -> std::result::Result<[f64; N], String> {
    let a = v.as_array().ok_or("expected an array")?;
    if a.len() != N {
        return Err(format!("expected {N} numbers, got {}", a.len()));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(a) {
        *o = num(x);
    }
    Ok(out)
}

fn strings(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

fn navsim(v: &Value) -> Parsed {
    let history = array(v, "ego_history")?
        .iter()
        .map(|s| {
            Ok([
                num(field(s, "t")?),
                num(field(s, "x")?),
                num(field(s, "y")?),
                num(field(s, "vx")?),
                num(field(s, "vy")?),
                num(field(s, "ax")?),
                num(field(s, "ay")?),
            ])
        })
        .collect::<std::result::Result<_, String>>()?;
    let future = array(v, "future")?.iter().map(fixed::<2>).collect::<std::result::Result<_, _>>()?;
    Ok(RawRecord {
        id: id_string(field(v, "token")?),
        history,
        future,
        leading_origin: false,
        reasoning: None,
        cameras: strings(v.get("cameras")),
    })
}

fn nuscenes(v: &Value) -> Parsed {
    let history = array(v, "history")?.iter().map(fixed::<7>).collect::<std::result::Result<_, _>>()?;
    let future = array(v, "actions")?.iter().map(fixed::<2>).collect::<std::result::Result<_, _>>()?;
    let cameras = ["cam_front", "cam_left", "cam_right"]
        .iter()
        .filter_map(|k| v.get(*k).and_then(Value::as_str).map(String::from))
        .collect();
    Ok(RawRecord {
        id: id_string(field(v, "sample_token")?),
        history,
        future,
        leading_origin: true,
        reasoning: v.get("reasoning").and_then(Value::as_str).map(String::from),
        cameras,
    })
}

fn columns(v: &Value, keys: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
    let cols: Vec<Vec<f64>> = keys
        .iter()
        .map(|k| Ok(array(v, k)?.iter().map(num).collect()))
        .collect::<std::result::Result<_, String>>()?;
    if cols.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err("column lengths differ".into());
    }
    Ok(cols)
}

fn waymo(v: &Value) -> Parsed {
    let past = columns(field(v, "past")?, &["t", "x", "y", "vx", "vy", "ax", "ay"])?;
    let fut = columns(field(v, "future")?, &["x", "y"])?;
    let history = (0..past[0].len())
        .map(|i| std::array::from_fn(|c| past[c][i]))
        .collect();
    let future = (0..fut[0].len()).map(|i| [fut[0][i], fut[1][i]]).collect();
    Ok(RawRecord {
        id: format!("{}_{}", id_string(field(v, "segment")?), id_string(field(v, "frame")?)),
        history,
        future,
        ..Default::default()
    })
}

fn mapillary(v: &Value) -> Parsed {
    let history = array(v, "states")?
        .iter()
        .map(|s| {
            let p = fixed::<2>(field(s, "pos")?)?;
            let vel = fixed::<2>(field(s, "vel")?)?;
            let acc = fixed::<2>(field(s, "acc")?)?;
            Ok([num(field(s, "time_s")?), p[0], p[1], vel[0], vel[1], acc[0], acc[1]])
        })
        .collect::<std::result::Result<_, String>>()?;
    let future = array(v, "waypoints")?
        .iter()
        .map(|w| Ok([num(field(w, "x")?), num(field(w, "y")?)]))
        .collect::<std::result::Result<_, String>>()?;
    Ok(RawRecord {
        id: id_string(field(v, "sequence_key")?),
        history,
        future,
        ..Default::default()
    })
}

fn once(v: &Value) -> Parsed {
    let ego = field(v, "ego")?;
    let history = array(ego, "history")?.iter().map(fixed::<7>).collect::<std::result::Result<_, _>>()?;
    let future = array(ego, "plan")?.iter().map(fixed::<2>).collect::<std::result::Result<_, _>>()?;
    Ok(RawRecord {
        id: id_string(field(v, "frame_id")?),
        history,
        future,
        reasoning: v.get("reasoning").and_then(Value::as_str).map(String::from),
        ..Default::default()
    })
}

fn parse_f64s(s: &str, sep: char) -> std::result::Result<Vec<f64>, String> {
    s.split(sep)
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

fn argoverse2(text: &str) -> Vec<Parsed> {
    let mut out: Vec<Parsed> = Vec::new();
    let mut current: Option<RawRecord> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("scenario_id") {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 9 {
            out.push(Err(format!("line {}: expected 9 columns, got {}", n + 1, cells.len())));
            continue;
        }
        let values = match parse_f64s(&cells[2..].join(","), ',') {
            Ok(v) => v,
            Err(e) => {
                out.push(Err(format!("line {}: {e}", n + 1)));
                continue;
            }
        };
        if current.as_ref().is_none_or(|r| r.id != cells[0]) {
            if let Some(done) = current.take() {
                out.push(Ok(done));
            }
            current = Some(RawRecord {
                id: cells[0].to_string(),
                ..Default::default()
            });
        }
        let rec = current.as_mut().expect("set above");
        match cells[1] {
            "past" => rec.history.push(std::array::from_fn(|i| values[i])),
            "future" => rec.future.push([values[1], values[2]]),
            other => out.push(Err(format!("line {}: unknown phase {other:?}", n + 1))),
        }
    }
    if let Some(done) = current {
        out.push(Ok(done));
    }
    out
}

fn kitti(text: &str) -> Vec<Parsed> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 3 {
                return Err(format!("expected 3 '|' fields, got {}", parts.len()));
            }
            let history = parts[1]
                .split(';')
                .map(|s| {
                    let v = parse_f64s(s, ',')?;
                    <[f64; 7]>::try_from(v).map_err(|v| format!("state has {} values", v.len()))
                })
                .collect::<std::result::Result<_, _>>()?;
            let future = parts[2]
                .split(';')
                .map(|s| {
                    let v = parse_f64s(s, ',')?;
                    <[f64; 2]>::try_from(v).map_err(|v| format!("waypoint has {} values", v.len()))
                })
                .collect::<std::result::Result<_, _>>()?;
            Ok(RawRecord {
                id: parts[0].trim().to_string(),
                history,
                future,
                ..Default::default()
            })
        })
        .collect()
}

fn idd(text: &str) -> Vec<Parsed> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let (id, rest) = line.split_once(',').ok_or("missing clip id")?;
            let values = parse_f64s(rest, ',')?;
            let n_hist = *values.first().ok_or("missing history count")? as usize;
            let body = &values[1..];
            if body.len() < n_hist * 7 || (body.len() - n_hist * 7) % COORD_DIMS != 0 {
                return Err(format!("bad value count {} for {n_hist} states", body.len()));
            }
            let (h, f) = body.split_at(n_hist * 7);
            Ok(RawRecord {
                id: id.trim().to_string(),
                history: h.chunks(7).map(|c| std::array::from_fn(|i| c[i])).collect(),
                future: f.chunks(2).map(|c| [c[0], c[1]]).collect(),
                ..Default::default()
            })
        })
        .collect()
}
