//! JSON and JSONL file formats.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use igpo_core::env::{Corpus, Document, Task};
use igpo_core::train::TaskInstance;
use igpo_core::Trajectory;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Non-blank lines of a file, with 1-based line numbers.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: read error", path.display()))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).with_context(|| format!("{}:{n}: invalid record", path.display())))
        .collect()
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Trajectories with turn indices restored.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = read_jsonl(path)?;
    out.iter_mut().for_each(Trajectory::reindex);
    Ok(out)
}

pub fn task_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("task_{i:04}.json"))
}

/// `<stem>.corpus.jsonl` next to a task file.
pub fn corpus_path(task_file: &Path) -> PathBuf {
    let stem = task_file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    task_file.with_file_name(format!("{stem}.corpus.jsonl"))
}

pub fn write_task(task_file: &Path, corpus: &Corpus, task: &Task) -> Result<()> {
    write_json(task_file, task)?;
    write_jsonl(&corpus_path(task_file), corpus.docs())
}

pub fn read_task(task_file: &Path) -> Result<TaskInstance> {
    let task: Task = read_json(task_file)?;
    let docs: Vec<Document> = read_jsonl(&corpus_path(task_file))?;
    let corpus = Corpus::new(docs).with_context(|| format!("{}: bad corpus", task_file.display()))?;
    TaskInstance::new(corpus, task).with_context(|| format!("{}: task does not match its corpus", task_file.display()))
}

/// A single task file, or every `*.json` task file in a directory in name order.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    if path.is_file() {
        return Ok(vec![read_task(path)?]);
    }
    if !path.is_dir() {
        bail!("no task file or directory at {}", path.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("cannot list {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} contains no task files", path.display());
    }
    files.iter().map(|f| read_task(f)).collect()
}
