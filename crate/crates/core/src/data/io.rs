use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, EpisodeMeta, Step, Trajectory};
use crate::error::{contract, Error, Result};
use crate::tensor::checkpoint::sha256_hex;
use crate::tensor::Precision;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum Split {
    Expert,
    Suboptimal,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    o: Vec<String>,
    a: Vec<String>,
    m: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    split: Split,
    meta: EpisodeMeta,
    steps: Vec<StepRecord>,
    #[serde(rename = "final")]
    final_observation: Vec<String>,
}

fn encode(values: &[f64], precision: Precision) -> Result<Vec<String>> {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(contract!("dataset value {v} is not finite"));
            }
            Ok(match precision {
                Precision::F32 => (v as f32).to_string(),
                Precision::F64 => v.to_string(),
            })
        })
        .collect()
}

fn decode(values: &[String], precision: Precision) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            let v: f64 = s.parse().map_err(|_| Error::Corruption(format!("{s:?} is not a decimal number")))?;
            Ok(precision.round(v))
        })
        .collect()
}

pub(crate) fn round_trajectory(t: &mut Trajectory, precision: Precision) {
    let round = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = precision.round(*x));
    for s in &mut t.steps {
        round(&mut s.observation);
        round(&mut s.action);
        if let Some(r) = s.reward.as_mut() {
            *r = precision.round(*r);
        }
    }
    round(&mut t.final_observation);
}

pub(crate) fn episode_line(split: Split, t: &Trajectory, precision: Precision) -> Result<String> {
    let steps = t
        .steps
        .iter()
        .map(|s| {
            Ok(StepRecord {
                o: encode(&s.observation, precision)?,
                a: encode(&s.action, precision)?,
                m: s.action_masked,
                r: s.reward.map(|r| encode(&[r], precision)).transpose()?.map(|mut v| v.remove(0)),
            })
        })
        .collect::<Result<_>>()?;
    let record = EpisodeRecord {
        split,
        meta: t.meta.clone(),
        steps,
        final_observation: encode(&t.final_observation, precision)?,
    };
    Ok(serde_json::to_string(&record)?)
}

fn parse_episode(line: &str, precision: Precision) -> Result<(Split, Trajectory)> {
    let record: EpisodeRecord =
        serde_json::from_str(line).map_err(|e| Error::Corruption(format!("malformed episode line: {e}")))?;
    let steps = record
        .steps
        .iter()
        .map(|s| {
            Ok(Step {
                observation: decode(&s.o, precision)?,
                action: decode(&s.a, precision)?,
                action_masked: s.m,
                reward: s.r.as_ref().map(|r| decode(std::slice::from_ref(r), precision)).transpose()?.map(|v| v[0]),
            })
        })
        .collect::<Result<_>>()?;
    let trajectory =
        Trajectory { steps, final_observation: decode(&record.final_observation, precision)?, meta: record.meta };
    Ok((record.split, trajectory))
}

pub(crate) fn payload_hash(lines: &[String]) -> String {
    let mut payload = Vec::new();
    for line in lines {
        payload.extend_from_slice(line.as_bytes());
        payload.push(b'\n');
    }
    sha256_hex(&payload)
}

/// Writes the manifest line followed by one line per episode, expert
/// demonstrations first.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let lines = dataset.payload_lines()?;
    let mut manifest = dataset.manifest.clone();
    manifest.content_hash = payload_hash(&lines);
    manifest.conversion_note = None;
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(file, "{}", serde_json::to_string(&manifest)?)?;
    for line in &lines {
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`] into a session of the given
/// precision. Values are converted when the file precision differs, and the
/// returned manifest then says so.
pub fn load_dataset(path: impl AsRef<Path>, session: Precision) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.split_terminator('\n');
    let head = lines.next().ok_or_else(|| Error::Corruption("dataset file is empty".into()))?;
    let probe: serde_json::Value =
        serde_json::from_str(head).map_err(|e| Error::Corruption(format!("unreadable manifest line: {e}")))?;
    match probe.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::Format(format!("unsupported dataset format version {v}"))),
        None => return Err(Error::Format("manifest has no format_version".into())),
    }
    let mut manifest: DatasetManifest =
        serde_json::from_value(probe).map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
    let payload: Vec<String> = lines.map(str::to_owned).collect();
    if !text.ends_with('\n') {
        return Err(Error::Corruption("dataset file is truncated".into()));
    }
    let hash = payload_hash(&payload);
    if hash != manifest.content_hash {
        return Err(Error::Corruption(format!(
            "content hash {hash} does not match the manifest's {}",
            manifest.content_hash
        )));
    }
    if payload.len() != manifest.expert_demos + manifest.suboptimal_episodes {
        return Err(Error::Corruption("episode count disagrees with the manifest".into()));
    }

    let file_precision = manifest.precision;
    let mut expert = Vec::new();
    let mut suboptimal = Vec::new();
    for line in &payload {
        let (split, mut t) = parse_episode(line, file_precision)?;
        round_trajectory(&mut t, session);
        match split {
            Split::Expert => expert.push(t),
            Split::Suboptimal => suboptimal.push(t),
        }
    }
    if expert.len() != manifest.expert_demos {
        return Err(Error::Corruption("split sizes disagree with the manifest".into()));
    }
    if file_precision != session {
        manifest.conversion_note = Some(match (file_precision, session) {
            (Precision::F64, Precision::F32) => {
                "values written in f64 were rounded to the nearest f32 for this session".into()
            }
            _ => format!("values written in {file_precision} were widened exactly to {session}"),
        });
        manifest.normalization.mean.iter_mut().for_each(|v| *v = session.round(*v));
        manifest.normalization.std.iter_mut().for_each(|v| *v = session.round(*v));
        manifest.precision = session;
    }
    Ok(Dataset { manifest, suboptimal, expert })
}
