use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PgdsError, Result};

const MAGIC: &[u8; 4] = b"PGHM";

/// Per-joint confidence maps stored as h x w x J (joint index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointHeatmap {
    pub height: usize,
    pub width: usize,
    pub joints: usize,
    pub data: Vec<f32>,
}

impl KeypointHeatmap {
    pub fn zeros(height: usize, width: usize, joints: usize) -> Self {
        Self {
            height,
            width,
            joints,
            data: vec![0.0; height * width * joints],
        }
    }

    pub fn get(&self, y: usize, x: usize, j: usize) -> f32 {
        self.data[(y * self.width + x) * self.joints + j]
    }

    pub fn set(&mut self, y: usize, x: usize, j: usize, v: f32) {
        self.data[(y * self.width + x) * self.joints + j] = v;
    }

    /// Location `(y, x)` of the maximum of channel `j` (first occurrence).
    pub fn argmax(&self, j: usize) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f32::NEG_INFINITY;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x, j);
                if v > best_v {
                    best_v = v;
                    best = (y, x);
                }
            }
        }
        best
    }

    /// Channel-major f64 copy (J x h x w), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.joints];
        for p in 0..plane {
            for j in 0..self.joints {
                out[j * plane + p] = self.data[p * self.joints + j] as f64;
            }
        }
        out
    }

    /// Binary layout: 4-byte magic, then h, w, J as little-endian u32, then
    /// h*w*J little-endian f32 values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        for d in [self.height, self.width, self.joints] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| PgdsError::io(path, e))?;
        f.write_all(&buf).map_err(|e| PgdsError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| PgdsError::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(PgdsError::Parse(format!(
                "{}: not a heatmap file",
                path.display()
            )));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, joints) = (dim(0), dim(1), dim(2));
        let n = height * width * joints;
        if bytes.len() != 16 + 4 * n {
            return Err(PgdsError::Parse(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                4 * n,
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            joints,
            data,
        })
    }
}
