use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Episode, EpisodeInfo, Transition};
use crate::env::{Action, Observation, CHANNELS, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic, write_string, Reader};

pub const MAGIC: &[u8; 4] = b"CMWM";
pub const FORMAT_VERSION: u16 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    total_transitions: usize,
    episodes: Vec<ManifestEntry>,
    #[serde(default)]
    provenance: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    length: usize,
    #[serde(flatten)]
    info: EpisodeInfo,
}

fn episode_file(index: usize) -> String {
    format!("episode_{index:05}.cmwm")
}

pub fn encode_episode(episode: &Episode) -> Vec<u8> {
    let t = episode.len();
    let mut out = Vec::with_capacity(15 + t * (Observation::LEN + 6));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(HEIGHT as u16).to_le_bytes());
    out.extend_from_slice(&(WIDTH as u16).to_le_bytes());
    out.push(CHANNELS as u8);
    for tr in &episode.transitions {
        out.extend_from_slice(tr.s.pixels());
    }
    out.extend(episode.transitions.iter().map(|tr| tr.a.index() as u8));
    for tr in &episode.transitions {
        out.extend_from_slice(&tr.r.to_le_bytes());
    }
    out.extend(episode.transitions.iter().map(|tr| tr.d as u8));
    out
}

pub fn decode_episode(path: &Path, bytes: &[u8], info: EpisodeInfo) -> Result<Episode> {
    let mut r = Reader::new(path, bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "CMWM",
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let t = r.u32("length")? as usize;
    let (h, w, c) = (r.u16("height")? as usize, r.u16("width")? as usize, r.u8("channels")? as usize);
    if (h, w, c) != (HEIGHT, WIDTH, CHANNELS) {
        return Err(r.format(format!(
            "frame shape {h}x{w}x{c}, expected {HEIGHT}x{WIDTH}x{CHANNELS}"
        )));
    }
    let pixels = r.take(t * Observation::LEN, "pixels")?;
    let actions = r.take(t, "actions")?;
    let rewards = r.take(4 * t, "rewards")?;
    let dones = r.take(t, "done flags")?;
    if !r.is_at_end() {
        return Err(r.format("trailing bytes after done flags".into()));
    }
    let mut transitions = Vec::with_capacity(t);
    for i in 0..t {
        let s = Observation::from_pixels(pixels[i * Observation::LEN..(i + 1) * Observation::LEN].to_vec())
            .expect("slice has frame length");
        let a = Action::new(actions[i] as usize).map_err(|_| r.format(format!("action {} at step {i}", actions[i])))?;
        let d = match dones[i] {
            0 => false,
            1 => true,
            v => return Err(r.format(format!("done flag {v} at step {i}"))),
        };
        let rb: [u8; 4] = rewards[4 * i..4 * i + 4].try_into().expect("4 bytes");
        transitions.push(Transition {
            s,
            a,
            r: f32::from_le_bytes(rb),
            d,
        });
    }
    Ok(Episode { info, transitions })
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stale = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("episode_") && n.ends_with(".cmwm"));
        if stale {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut entries = Vec::with_capacity(dataset.episodes.len());
    for (i, ep) in dataset.episodes.iter().enumerate() {
        let file = episode_file(i);
        write_atomic(&dir.join(&file), &encode_episode(ep))?;
        entries.push(ManifestEntry {
            file,
            length: ep.len(),
            info: ep.info.clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        total_transitions: dataset.total_transitions(),
        episodes: entries,
        provenance: dataset.provenance.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_string(&dir.join(MANIFEST), &json)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Format {
            path: manifest_path,
            reason: "dataset manifest not found".into(),
        });
    }
    let manifest: Manifest = serde_json::from_str(&read_string(&manifest_path)?).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: manifest_path,
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in manifest.episodes {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ep = decode_episode(&path, &bytes, entry.info)?;
        if ep.len() != entry.length {
            return Err(Error::Format {
                path,
                reason: format!("manifest lists {} transitions, file holds {}", entry.length, ep.len()),
            });
        }
        episodes.push(ep);
    }
    let dataset = Dataset {
        episodes,
        provenance: manifest.provenance,
    };
    if dataset.total_transitions() != manifest.total_transitions {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: format!(
                "manifest total {} disagrees with episode sum {}",
                manifest.total_transitions,
                dataset.total_transitions()
            ),
        });
    }
    Ok(dataset)
}
