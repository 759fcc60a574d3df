//! Uncompressed COCO-style run-length masks.
//!
//! Runs alternate between background and foreground, starting with a
//! (possibly empty) background run, over row-major pixel order.

use serde::{Deserialize, Serialize};

use super::FrameError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rle {
    pub counts: Vec<u32>,
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

impl Rle {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    /// Checks that the runs cover exactly `pixel_count` pixels.
    pub fn validate(&self, pixel_count: usize) -> Result<(), FrameError> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != pixel_count as u64 {
            return Err(FrameError::Format(format!(
                "RLE runs sum to {total}, expected {pixel_count}"
            )));
        }
        Ok(())
    }

    /// Foreground runs as `(start, len)` pixel ranges. Assumes a validated RLE.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as usize;
            (i % 2 == 1 && c > 0).then_some((start, c as usize))
        })
    }

    pub fn foreground_count(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }

    pub fn decode(&self, width: u32, height: u32) -> Result<BinaryMask, FrameError> {
        let mut mask = BinaryMask::new(width, height);
        self.validate(mask.bits.len())?;
        for (start, len) in self.foreground_runs() {
            mask.bits[start..start + len].fill(true);
        }
        Ok(mask)
    }

    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &mask.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Self { counts }
    }

    /// Pixel bounding box `(u_min, v_min, u_max, v_max)` of the foreground.
    pub fn bbox(&self, width: u32) -> Option<[u32; 4]> {
        let w = width as usize;
        let mut bbox: Option<[u32; 4]> = None;
        for (start, len) in self.foreground_runs() {
            let end = start + len - 1;
            let (v0, v1) = (start / w, end / w);
            let (u0, u1) = if v0 == v1 { (start % w, end % w) } else { (0, w - 1) };
            let b = bbox.get_or_insert([u0 as u32, v0 as u32, u1 as u32, v1 as u32]);
            b[0] = b[0].min(u0 as u32);
            b[1] = b[1].min(v0 as u32);
            b[2] = b[2].max(u1 as u32);
            b[3] = b[3].max(v1 as u32);
        }
        bbox
    }
}
