//! On-disk trace layout:
//!
//! ```text
//! <dir>/scale_00.csv ...   token maps, one CSV grid per scale
//! <dir>/snapshots.bin      attention snapshots (when captured)
//! <dir>/stats.json         per-scale cache statistics
//! <dir>/audit.json         retained indices per (layer, scale)
//! ```
//!
//! `snapshots.bin` is a sequence of records, each a header of five
//! little-endian `u32` (layer, scale, head, rows, cols) followed by
//! `rows * cols` little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::{AttentionSnapshot, GenerationTrace, ScaleCacheStats};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct StatsFile<'a> {
    policy: &'a str,
    prompt_seed: u64,
    vocab: usize,
    peak_bytes: u64,
    end_bytes: u64,
    scales: &'a [ScaleCacheStats],
}

impl GenerationTrace {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, map) in self.token_maps.iter().enumerate() {
            let path = dir.join(format!("scale_{k:02}.csv"));
            let mut text = String::new();
            for row in map.tokens.chunks_exact(map.cols) {
                let line: Vec<String> = row.iter().map(u32::to_string).collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if !self.snapshots.is_empty() {
            write_snapshots(&dir.join("snapshots.bin"), &self.snapshots)?;
        }
        let stats = StatsFile {
            policy: &self.policy,
            prompt_seed: self.prompt_seed,
            vocab: self.vocab,
            peak_bytes: self.peak_bytes(),
            end_bytes: self.end_bytes(),
            scales: &self.cache_stats,
        };
        let path = dir.join("stats.json");
        let text = serde_json::to_string_pretty(&stats).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        self.audit.save(&dir.join("audit.json"))
    }
}

pub fn write_snapshots(path: &Path, snapshots: &[AttentionSnapshot]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for s in snapshots {
        for v in [s.layer, s.scale, s.head, s.rows, s.cols] {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
        }
        for x in &s.weights {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_snapshots(path: &Path) -> Result<Vec<AttentionSnapshot>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    let mut header = [0u8; 20];
    loop {
        match r.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        let f = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (layer, scale, head, rows, cols) = (f(0), f(1), f(2), f(3), f(4));
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let weights = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(AttentionSnapshot {
            layer,
            scale,
            head,
            rows,
            cols,
            weights,
        });
    }
    Ok(out)
}
