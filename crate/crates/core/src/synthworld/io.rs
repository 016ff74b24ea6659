//! Sequence directories:
//!
//! ```text
//! config.txt        key=value world configuration plus the seed
//! frames/NNNNNN.raw 16-byte header (magic, width, height, channels as u32 LE), planar u8
//! gt.csv            frame,x,y,w,h
//! distractors.csv   frame,object,x,y,w,h
//! events.csv        frame,occluded_fraction
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameEvent, OcclusionEvent, Sequence, WorldConfig};
use crate::bbox::BBox;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"AVFR";

/// Writes an `H × W × C` frame with values in `[0, 1]`, quantized to `u8`.
pub fn write_frame(frame: &Tensor, w: &mut impl Write) -> Result<()> {
    let [h, wd, c] = frame.shape() else {
        return Err(Error::Format(format!("frame must be rank 3, got {:?}", frame.shape())));
    };
    let (h, wd, c) = (*h, *wd, *c);
    let mut buf = Vec::with_capacity(16 + h * wd * c);
    buf.extend_from_slice(FRAME_MAGIC);
    for v in [wd, h, c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let data = frame.data();
    for ch in 0..c {
        for i in 0..h * wd {
            buf.push((data[i * c + ch].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Tensor> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("frame header: {e}")))?;
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Format("bad frame magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (field(4), field(8), field(12));
    if w == 0 || h == 0 || c == 0 {
        return Err(Error::Format(format!("empty frame {w}x{h}x{c}")));
    }
    let mut planes = vec![0u8; w * h * c];
    r.read_exact(&mut planes)
        .map_err(|e| Error::Format(format!("frame body: {e}")))?;
    let mut data = vec![0.0; w * h * c];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = planes[ch * h * w + i] as f64 / 255.0;
        }
    }
    Tensor::new([h, w, c], data)
}

#[derive(Serialize, Deserialize)]
struct GtRow {
    frame: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct DistractorRow {
    frame: usize,
    object: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn config_text(cfg: &WorldConfig, seed: u64) -> String {
    let occ: Vec<String> = cfg
        .occlusions
        .iter()
        .map(|e| format!("{}-{}:{}", e.start, e.end, e.coverage))
        .collect();
    format!(
        "seed={seed}\nframe_side={}\nlength={}\nobjects={}\nappearance_seed={}\nsimilarity={}\nspeed={}\njitter={}\nscale_drift={}\ntarget_size={}\nocclusions={}\n",
        cfg.frame_side,
        cfg.length,
        cfg.objects,
        cfg.appearance_seed,
        cfg.similarity,
        cfg.speed,
        cfg.jitter,
        cfg.scale_drift,
        cfg.target_size,
        occ.join(",")
    )
}

fn parse_config(text: &str) -> Result<(WorldConfig, u64)> {
    let mut cfg = WorldConfig::default();
    let mut seed = None;
    let bad = |k: &str, v: &str| Error::Format(format!("config.txt: bad value {v:?} for {k}"));
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config.txt: expected key=value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        macro_rules! num {
            () => {
                v.parse().map_err(|_| bad(k, v))?
            };
        }
        match k {
            "seed" => seed = Some(num!()),
            "frame_side" => cfg.frame_side = num!(),
            "length" => cfg.length = num!(),
            "objects" => cfg.objects = num!(),
            "appearance_seed" => cfg.appearance_seed = num!(),
            "similarity" => cfg.similarity = num!(),
            "speed" => cfg.speed = num!(),
            "jitter" => cfg.jitter = num!(),
            "scale_drift" => cfg.scale_drift = num!(),
            "target_size" => cfg.target_size = num!(),
            "occlusions" => {
                cfg.occlusions = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        let (range, cov) = s.split_once(':').ok_or_else(|| bad(k, s))?;
                        let (a, b) = range.split_once('-').ok_or_else(|| bad(k, s))?;
                        Ok(OcclusionEvent {
                            start: a.parse().map_err(|_| bad(k, s))?,
                            end: b.parse().map_err(|_| bad(k, s))?,
                            coverage: cov.parse().map_err(|_| bad(k, s))?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Format(format!("config.txt: unknown key {k:?}"))),
        }
    }
    let seed = seed.ok_or_else(|| Error::Format("config.txt: missing seed".into()))?;
    cfg.validate()?;
    Ok((cfg, seed))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::write(dir.join("config.txt"), config_text(&seq.config, seq.seed))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("frames/{i:06}.raw")))?);
        write_frame(f, &mut out)?;
        out.flush()?;
    }
    let mut gt = csv::Writer::from_path(dir.join("gt.csv")).map_err(csv_err)?;
    for (frame, b) in seq.gt.iter().enumerate() {
        gt.serialize(GtRow {
            frame,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        })
        .map_err(csv_err)?;
    }
    gt.flush()?;
    let mut dw = csv::Writer::from_path(dir.join("distractors.csv")).map_err(csv_err)?;
    for (frame, boxes) in seq.distractors.iter().enumerate() {
        for (object, b) in boxes.iter().enumerate() {
            dw.serialize(DistractorRow {
                frame,
                object,
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
            .map_err(csv_err)?;
        }
    }
    dw.flush()?;
    let mut ev = csv::Writer::from_path(dir.join("events.csv")).map_err(csv_err)?;
    for e in &seq.events {
        ev.serialize(e).map_err(csv_err)?;
    }
    ev.flush()?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("sequence directory {} not found", dir.display()),
        )));
    }
    let (config, seed) = parse_config(&fs::read_to_string(dir.join("config.txt"))?)?;
    let mut gt = Vec::new();
    for (i, row) in csv::Reader::from_path(dir.join("gt.csv"))
        .map_err(csv_err)?
        .deserialize::<GtRow>()
        .enumerate()
    {
        let row = row.map_err(csv_err)?;
        if row.frame != i {
            return Err(Error::Format(format!("gt.csv: row {i} is for frame {}", row.frame)));
        }
        gt.push(BBox::new(row.x, row.y, row.w, row.h));
    }
    let mut frames = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        let mut f = std::io::BufReader::new(fs::File::open(dir.join(format!("frames/{i:06}.raw")))?);
        frames.push(read_frame(&mut f)?);
    }
    let mut distractors = vec![Vec::new(); gt.len()];
    let dpath = dir.join("distractors.csv");
    if dpath.exists() {
        for row in csv::Reader::from_path(dpath).map_err(csv_err)?.deserialize::<DistractorRow>() {
            let row = row.map_err(csv_err)?;
            let slot = distractors
                .get_mut(row.frame)
                .ok_or_else(|| Error::Format(format!("distractors.csv: frame {} out of range", row.frame)))?;
            slot.push(BBox::new(row.x, row.y, row.w, row.h));
        }
    }
    let events = csv::Reader::from_path(dir.join("events.csv"))
        .map_err(csv_err)?
        .deserialize::<FrameEvent>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    if events.len() != gt.len() {
        return Err(Error::Format(format!(
            "events.csv has {} rows for {} frames",
            events.len(),
            gt.len()
        )));
    }
    Ok(Sequence {
        config,
        seed,
        frames,
        gt,
        distractors,
        events,
    })
}
