//! On-disk formats: JSONL trajectories, segment annotations and pair
//! indexes, plus CSV metrics. Every writer is atomic: output appears under
//! its final name only once it is complete.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{TaskKind, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::stare::{StageId, StageSegment};

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub task: TaskKind,
    pub episode: u64,
    pub t: usize,
    #[serde(flatten)]
    pub transition: Transition,
}

/// Write `contents` through a sibling temporary file, renaming it into place
/// on success and deleting it on failure.
pub fn write_atomic<F>(path: &Path, contents: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    let result = File::create(&tmp).map_err(Error::from).and_then(|f| {
        let mut w = BufWriter::new(f);
        contents(&mut w)?;
        w.flush()?;
        Ok(())
    });
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    write_atomic(path, |w| {
        let records = trajectories.iter().flat_map(|traj| {
            traj.transitions.iter().enumerate().map(|(t, tr)| TransitionRecord {
                task: traj.task,
                episode: traj.episode,
                t,
                transition: tr.clone(),
            })
        });
        write_jsonl(w, records)
    })
}

/// Parse non-empty JSONL lines, reporting 1-based line numbers on error.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

/// Read a trajectory file. Consecutive lines with the same task and episode
/// form one trajectory; step indices must run 0, 1, 2, … within it.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let records: Vec<(usize, TransitionRecord)> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("trajectory file {}", path.display())));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for (line, rec) in records {
        let continues = out.last().is_some_and(|t| t.task == rec.task && t.episode == rec.episode);
        if !continues {
            out.push(Trajectory { task: rec.task, episode: rec.episode, transitions: Vec::new() });
        }
        let traj = out.last_mut().expect("pushed above");
        if rec.t != traj.transitions.len() {
            return Err(Error::Parse {
                line,
                msg: format!("episode {} expected step {}, found {}", rec.episode, traj.transitions.len(), rec.t),
            });
        }
        traj.transitions.push(rec.transition);
    }
    Ok(out)
}

/// One annotated stage segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub task: TaskKind,
    pub episode_id: u64,
    pub stage: StageId,
    pub start: usize,
    pub end: usize,
    pub cost_raw: f64,
    pub cost_normalized: f64,
    pub completed: bool,
}

impl SegmentRecord {
    pub fn new(task: TaskKind, episode_id: u64, s: &StageSegment) -> Self {
        SegmentRecord {
            task,
            episode_id,
            stage: s.stage,
            start: s.start,
            end: s.end,
            cost_raw: s.cost_raw,
            cost_normalized: s.cost_normalized,
            completed: s.completed,
        }
    }
}

pub fn write_segments(path: &Path, records: &[SegmentRecord]) -> Result<()> {
    write_atomic(path, |w| write_jsonl(w, records))
}

/// Index entry of a preference pair. Paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub episode_seed: u64,
    pub chosen_path: String,
    pub rejected_path: String,
    pub eligible_stages: Vec<StageId>,
    /// How the rejected trajectory was produced.
    pub failure_mode: String,
}

pub fn write_pair_index(path: &Path, records: &[PairRecord]) -> Result<()> {
    write_atomic(path, |w| write_jsonl(w, records))
}

pub fn read_pair_index(path: &Path) -> Result<Vec<PairRecord>> {
    let records: Vec<(usize, PairRecord)> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("pair index {}", path.display())));
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

/// Git-style content hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&fs::read(path)?))
}

/// A CSV cell: floats in shortest round-trip form, missing values empty.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        csv.write_record(header).map_err(io_err)?;
        for row in rows {
            if row.len() != header.len() {
                return Err(Error::Shape(format!("csv row of {} cells under a {}-column header", row.len(), header.len())));
            }
            csv.write_record(row).map_err(io_err)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let header = reader.headers().map_err(|e| Error::Io(std::io::Error::other(e)))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, scripted_expert, TaskSpec};

    #[test]
    fn trajectories_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        let spec = TaskSpec::new(TaskKind::LiftPegUpright);
        let trajs: Vec<_> = (0..3).map(|e| rollout(&spec, e, |s| scripted_expert(s, &spec)).unwrap()).collect();
        write_trajectories(&path, &trajs).unwrap();
        assert_eq!(read_trajectories(&path).unwrap(), trajs);
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(v["state"]["obj_rot"].as_array().unwrap().len(), 9);
        assert_eq!((v["task"].as_str(), v["t"].as_u64()), (Some("lift_peg_upright"), Some(0)));
    }

    #[test]
    fn malformed_and_empty_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::new(TaskKind::Push);
        let path = dir.path().join("t.jsonl");
        write_trajectories(&path, &[rollout(&spec, 0, |s| scripted_expert(s, &spec)).unwrap()]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        fs::write(&path, &text).unwrap();
        let n = text.lines().count();
        assert!(matches!(read_trajectories(&path), Err(Error::Parse { line, .. }) if line == n));

        // A skipped step index is a parse error at that line.
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, format!("{}\n{}\n", lines[0], lines[2])).unwrap();
        assert!(matches!(read_trajectories(&path), Err(Error::Parse { line: 2, .. })));

        fs::write(&path, "").unwrap();
        assert!(matches!(read_trajectories(&path), Err(Error::Empty(_))));
    }

    #[test]
    fn failed_writes_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(Error::Empty("boom".into()))
        });
        assert!(r.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn blob_hash_matches_git_object_format() {
        // Same preimage as `git hash-object`, hashed with SHA-256.
        use sha2::{Digest, Sha256};
        let expect = hex::encode(Sha256::digest(b"blob 6\0hello\n"));
        assert_eq!(blob_hash(b"hello\n"), expect);
        assert_eq!(blob_hash(b"").len(), 64);
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let header = vec!["step".to_string(), "loss".to_string()];
        let rows = vec![vec!["1".into(), cell(Some(0.1 + 0.2))], vec!["2".into(), cell(None)]];
        write_csv(&path, &header, &rows).unwrap();
        let (h, r) = read_csv(&path).unwrap();
        assert_eq!((h, r.clone()), (header, rows));
        assert_eq!(r[0][1].parse::<f64>().unwrap(), 0.1 + 0.2);
    }
}
