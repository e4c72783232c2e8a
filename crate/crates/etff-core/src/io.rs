//! Trajectory serialization (extended XYZ), dataset manifests, and the
//! temporal train/validation split.
//!
//! Floats are written as 17-significant-digit scientific notation, which
//! round-trips every finite f64 exactly; species go out as element symbols
//! for interoperability with standard tooling.

use crate::chem::{ChemError, Conformation, ElementTable, Trajectory};
use ndarray::Array2;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("frame {frame} (line {line}) changes the species sequence")]
    InconsistentSpecies { frame: usize, line: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(PathBuf),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    BadValFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Chem(#[from] ChemError),
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders a trajectory in extended-XYZ form. Per frame: the atom count, a
/// comment line of `key=value` pairs (`Properties`, optional `energy`,
/// `timestep_fs`, `source_tag` — tags must not contain whitespace), then one
/// line per atom: symbol, position, and forces when the frame carries them.
pub fn to_extxyz_string(traj: &Trajectory, table: &ElementTable) -> Result<String, IoError> {
    let mut out = String::new();
    for frame in traj.frames() {
        let n = frame.atom_count();
        let forces = frame.ref_forces();
        writeln!(out, "{n}").expect("string write");
        let mut comment = String::from("Properties=species:S:1:pos:R:3");
        if forces.is_some() {
            comment.push_str(":forces:R:3");
        }
        if let Some(e) = frame.ref_energy() {
            write!(comment, " energy={}", fmt_f64(e)).expect("string write");
        }
        write!(
            comment,
            " timestep_fs={} source_tag={}",
            fmt_f64(traj.timestep_fs()),
            traj.source_tag()
        )
        .expect("string write");
        writeln!(out, "{comment}").expect("string write");

        let pos = frame.positions();
        for i in 0..n {
            let symbol = table.symbol(frame.species()[i])?;
            write!(
                out,
                "{symbol} {} {} {}",
                fmt_f64(pos[[i, 0]]),
                fmt_f64(pos[[i, 1]]),
                fmt_f64(pos[[i, 2]])
            )
            .expect("string write");
            if let Some(f) = forces {
                write!(
                    out,
                    " {} {} {}",
                    fmt_f64(f[[i, 0]]),
                    fmt_f64(f[[i, 1]]),
                    fmt_f64(f[[i, 2]])
                )
                .expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_extxyz(traj: &Trajectory, path: &Path, table: &ElementTable) -> Result<(), IoError> {
    let text = to_extxyz_string(traj, table)?;
    std::fs::write(path, text)?;
    Ok(())
}

struct FrameHeader {
    has_forces: bool,
    energy: Option<f64>,
    timestep_fs: Option<f64>,
    source_tag: Option<String>,
}

fn parse_header(line: &str, line_no: usize) -> Result<FrameHeader, IoError> {
    let parse = |msg: String| IoError::Parse { line: line_no, msg };
    let mut header = FrameHeader {
        has_forces: false,
        energy: None,
        timestep_fs: None,
        source_tag: None,
    };
    let mut saw_properties = false;
    for token in line.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse(format!("expected key=value, got {token:?}")))?;
        match key {
            "Properties" => {
                saw_properties = true;
                match value {
                    "species:S:1:pos:R:3" => header.has_forces = false,
                    "species:S:1:pos:R:3:forces:R:3" => header.has_forces = true,
                    other => {
                        return Err(parse(format!("unsupported Properties layout {other:?}")))
                    }
                }
            }
            "energy" => {
                header.energy = Some(
                    f64::from_str(value)
                        .map_err(|e| parse(format!("bad energy {value:?}: {e}")))?,
                );
            }
            "timestep_fs" => {
                header.timestep_fs = Some(
                    f64::from_str(value)
                        .map_err(|e| parse(format!("bad timestep_fs {value:?}: {e}")))?,
                );
            }
            "source_tag" => header.source_tag = Some(value.to_string()),
            _ => {} // foreign keys are tolerated and dropped
        }
    }
    if !saw_properties {
        return Err(parse("missing Properties key".into()));
    }
    Ok(header)
}

/// Parses extended-XYZ text. Unknown comment keys are ignored; missing
/// `timestep_fs` defaults to 1.0 and missing `source_tag` to `default_tag`.
pub fn parse_extxyz_str(
    text: &str,
    table: &ElementTable,
    default_tag: &str,
) -> Result<Trajectory, IoError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames: Vec<Conformation> = Vec::new();
    let mut timestep = None;
    let mut tag = None;
    let mut cursor = 0usize;

    while cursor < lines.len() {
        // Tolerate blank separator lines between frames (and a trailing
        // newline), but not inside a frame.
        if lines[cursor].trim().is_empty() {
            cursor += 1;
            continue;
        }
        let frame_no = frames.len();
        let count_line_no = cursor + 1;
        let n: usize = lines[cursor].trim().parse().map_err(|_| IoError::Parse {
            line: count_line_no,
            msg: format!("expected atom count, got {:?}", lines[cursor]),
        })?;
        if n == 0 {
            return Err(IoError::Parse {
                line: count_line_no,
                msg: "frame with zero atoms".into(),
            });
        }
        if cursor + 1 >= lines.len() {
            return Err(IoError::Parse {
                line: count_line_no + 1,
                msg: "missing comment line".into(),
            });
        }
        let header = parse_header(lines[cursor + 1], count_line_no + 1)?;
        if frame_no == 0 {
            timestep = header.timestep_fs;
            tag = header.source_tag.clone();
        }

        let mut positions = Array2::zeros((n, 3));
        let mut forces = header.has_forces.then(|| Array2::zeros((n, 3)));
        let mut species = Vec::with_capacity(n);
        for i in 0..n {
            let line_no = count_line_no + 2 + i;
            let line = lines.get(cursor + 2 + i).copied().ok_or(IoError::Parse {
                line: line_no,
                msg: format!("frame needs {n} atom lines, file ended early"),
            })?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let expected = if header.has_forces { 7 } else { 4 };
            if fields.len() != expected {
                return Err(IoError::Parse {
                    line: line_no,
                    msg: format!("expected {expected} fields, got {}", fields.len()),
                });
            }
            let id = table.id_of(fields[0]).map_err(|_| IoError::Parse {
                line: line_no,
                msg: format!("unknown species symbol {:?}", fields[0]),
            })?;
            species.push(id);
            for a in 0..3 {
                positions[[i, a]] =
                    f64::from_str(fields[1 + a]).map_err(|e| IoError::Parse {
                        line: line_no,
                        msg: format!("bad coordinate {:?}: {e}", fields[1 + a]),
                    })?;
            }
            if let Some(f) = forces.as_mut() {
                for a in 0..3 {
                    f[[i, a]] = f64::from_str(fields[4 + a]).map_err(|e| IoError::Parse {
                        line: line_no,
                        msg: format!("bad force {:?}: {e}", fields[4 + a]),
                    })?;
                }
            }
        }
        if let Some(first) = frames.first() {
            if first.species() != species.as_slice() {
                return Err(IoError::InconsistentSpecies {
                    frame: frame_no,
                    line: count_line_no + 2,
                });
            }
        }
        frames.push(Conformation::with_labels(
            positions,
            species,
            header.energy,
            forces,
        )?);
        cursor += 2 + n;
    }

    if frames.is_empty() {
        return Err(IoError::Parse {
            line: 1,
            msg: "no frames in input".into(),
        });
    }
    Ok(Trajectory::new(
        frames,
        timestep.unwrap_or(1.0),
        tag.unwrap_or_else(|| default_tag.to_string()),
    )?)
}

pub fn read_extxyz(path: &Path, table: &ElementTable) -> Result<Trajectory, IoError> {
    let text = std::fs::read_to_string(path)?;
    let default_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "extxyz".to_string());
    parse_extxyz_str(&text, table, &default_tag)
}

/// How a manifest entry is used downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(format!("unknown role {other:?} (train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub molecule: String,
    pub path: PathBuf,
    pub role: Role,
}

/// Names the trajectory files of a dataset and what each is for.
/// Line-oriented text: `seed = <u64>` once, then one
/// `entry = <molecule> <path> <role>` per file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(seed: u64, entries: Vec<ManifestEntry>) -> Result<Self, IoError> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(IoError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self { seed, entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        for e in &self.entries {
            writeln!(
                out,
                "entry = {} {} {}",
                e.molecule,
                e.path.display(),
                e.role
            )
            .expect("string write");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut seed = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| IoError::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            match key.trim() {
                "seed" => {
                    seed = Some(value.trim().parse().map_err(|e| IoError::Parse {
                        line: line_no,
                        msg: format!("bad seed: {e}"),
                    })?);
                }
                "entry" => {
                    let fields: Vec<&str> = value.split_whitespace().collect();
                    if fields.len() != 3 {
                        return Err(IoError::Parse {
                            line: line_no,
                            msg: format!(
                                "entry needs `<molecule> <path> <role>`, got {} fields",
                                fields.len()
                            ),
                        });
                    }
                    let role = Role::from_str(fields[2])
                        .map_err(|msg| IoError::Parse { line: line_no, msg })?;
                    entries.push(ManifestEntry {
                        molecule: fields[0].to_string(),
                        path: PathBuf::from(fields[1]),
                        role,
                    });
                }
                other => {
                    return Err(IoError::Parse {
                        line: line_no,
                        msg: format!("unknown manifest key {other:?}"),
                    });
                }
            }
        }
        let seed = seed.ok_or(IoError::Parse {
            line: 1,
            msg: "manifest missing `seed = <u64>`".into(),
        })?;
        Self::new(seed, entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Validation frame count for a temporal tail split: ceil(frames·fraction),
/// but always leaving at least one training frame.
pub fn val_frame_count(frames: usize, val_fraction: f64) -> usize {
    let raw = (frames as f64 * val_fraction).ceil() as usize;
    raw.min(frames.saturating_sub(1))
}

/// Splits each trajectory into a training head and validation tail, writes
/// `<name>_train.extxyz` / `<name>_val.extxyz` into `out_dir`, and returns
/// the manifest. The split is temporal, so validation frames are always the
/// *later* part of each run, and deterministic: the seed is only recorded
/// for downstream consumers.
pub fn split_dataset(
    trajs: &[(String, Trajectory)],
    val_fraction: f64,
    seed: u64,
    table: &ElementTable,
    out_dir: &Path,
) -> Result<DatasetManifest, IoError> {
    if trajs.is_empty() {
        return Err(IoError::EmptyDataset);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(IoError::BadValFraction(val_fraction));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (name, traj) in trajs {
        let n = traj.len();
        let n_val = val_frame_count(n, val_fraction);
        let train = traj.slice(0, n - n_val)?;
        let train_path = out_dir.join(format!("{name}_train.extxyz"));
        write_extxyz(&train, &train_path, table)?;
        entries.push(ManifestEntry {
            molecule: name.clone(),
            path: train_path,
            role: Role::Train,
        });
        if n_val > 0 {
            let val = traj.slice(n - n_val, n)?;
            let val_path = out_dir.join(format!("{name}_val.extxyz"));
            write_extxyz(&val, &val_path, table)?;
            entries.push(ManifestEntry {
                molecule: name.clone(),
                path: val_path,
                role: Role::Val,
            });
        }
    }
    DatasetManifest::new(seed, entries)
}
