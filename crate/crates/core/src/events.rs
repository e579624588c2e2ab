//! JSONL event log shared by every training strategy.

use std::io::{BufRead, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{pack_bits, unpack_bits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "estimate")]
    Estimate,
    #[serde(rename = "prune")]
    Prune,
    #[serde(rename = "improve")]
    Improve,
    #[serde(rename = "explore")]
    Explore,
    #[serde(rename = "grow")]
    Grow,
    #[serde(rename = "post-period")]
    PostPeriod,
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "dense-grad")]
    DenseGrad,
    /// Masks are fixed from here on.
    #[serde(rename = "freeze")]
    Freeze,
    #[serde(rename = "warning")]
    Warning,
    #[serde(rename = "diverged")]
    Diverged,
}

impl EventKind {
    /// Whether the record stands for one optimizer iteration.
    pub fn is_training(self) -> bool {
        matches!(
            self,
            EventKind::Estimate
                | EventKind::Improve
                | EventKind::Explore
                | EventKind::PostPeriod
                | EventKind::Train
                | EventKind::DenseGrad
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub iter: u64,
    pub stage: EventKind,
    pub t: usize,
    pub omega_t: f64,
    pub active_count: usize,
    pub resource: f64,
    pub loss: Option<f64>,
    pub flops_cum: f64,
    /// Active-set snapshot on prune and grow events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Event {
    pub fn decoded_mask(&self) -> Result<Option<Vec<bool>>> {
        self.mask.as_deref().map(decode_mask).transpose()
    }
}

/// base64 of the deflated `[u64 LE bit count][bit-packed bits]`.
pub fn encode_mask(bits: &[bool]) -> String {
    let mut raw = (bits.len() as u64).to_le_bytes().to_vec();
    raw.extend(pack_bits(bits));
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw).expect("write to memory");
    STANDARD.encode(enc.finish().expect("deflate to memory"))
}

pub fn decode_mask(s: &str) -> Result<Vec<bool>> {
    let bad = |m: &str| Error::Checkpoint(format!("mask snapshot: {m}"));
    let compressed = STANDARD.decode(s).map_err(|e| bad(&e.to_string()))?;
    let mut raw = Vec::new();
    DeflateDecoder::new(compressed.as_slice())
        .read_to_end(&mut raw)
        .map_err(|e| bad(&e.to_string()))?;
    if raw.len() < 8 {
        return Err(bad("truncated"));
    }
    let n = u64::from_le_bytes(raw[..8].try_into().expect("8 bytes")) as usize;
    unpack_bits(&raw[8..], n)
}

/// Ordered, lossless receiver of events.
pub trait EventSink {
    fn record(&mut self, event: &Event) -> Result<()>;
}

impl EventSink for Vec<Event> {
    fn record(&mut self, event: &Event) -> Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> EventSink for JsonlSink<W> {
    fn record(&mut self, event: &Event) -> Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

/// Forwards to both sinks.
pub struct Tee<'a> {
    pub a: &'a mut dyn EventSink,
    pub b: &'a mut dyn EventSink,
}

impl EventSink for Tee<'_> {
    fn record(&mut self, event: &Event) -> Result<()> {
        self.a.record(event)?;
        self.b.record(event)
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
