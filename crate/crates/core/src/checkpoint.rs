//! Versioned checkpoint files.
//!
//! Layout: the magic `VFR1`, a little-endian `u64` header length, a UTF-8
//! JSON header (config echo, step, scene, array manifest) and the payload:
//! little-endian `f32` arrays in manifest order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::render::RenderMode;
use crate::sampling::{Aabb, OccupancyGrid};

pub const MAGIC: &[u8; 4] = b"VFR1";

const OCC_EMA: &str = "occupancy.density_ema";
const OCC_BITS: &str = "occupancy.bits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: String,
    step: usize,
    scene: String,
    mode: String,
    aabb: [[f64; 3]; 2],
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration text (`RunConfig::dump`).
    pub config: String,
    pub step: usize,
    /// Scene directory the model was trained on.
    pub scene: String,
    /// Mode the model renders in (`pilot` before the handoff).
    pub mode: RenderMode,
    pub aabb: Aabb,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        model: &Model<f32>,
        occupancy: &OccupancyGrid,
        step: usize,
        scene: &str,
        mode: RenderMode,
    ) -> Self {
        let mut arrays: Vec<NamedArray> = model
            .params()
            .into_iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.values.clone(),
            })
            .collect();
        let r = occupancy.resolution;
        arrays.push(NamedArray {
            name: OCC_EMA.into(),
            shape: vec![r, r, r],
            data: occupancy.density_ema.clone(),
        });
        arrays.push(NamedArray {
            name: OCC_BITS.into(),
            shape: vec![r, r, r],
            data: occupancy.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        });
        Self {
            config: config.dump(),
            step,
            scene: scene.to_string(),
            mode,
            aabb: occupancy.aabb,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let manifest = self
            .arrays
            .iter()
            .map(|a| {
                let e = ManifestEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                };
                offset += a.data.len();
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            scene: self.scene.clone(),
            mode: self.mode.name().to_string(),
            aabb: [self.aabb.min, self.aabb.max],
            manifest,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + text.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let body = &bytes[12..];
        if hlen > body.len() as u64 {
            return Err(bad(format!("header length {hlen} exceeds file size {}", bytes.len())));
        }
        let (head, payload) = body.split_at(hlen as usize);
        let text = std::str::from_utf8(head).map_err(|e| bad(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(text).map_err(|e| bad(format!("malformed header: {e}")))?;
        let mut expect = 0usize;
        let mut arrays = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            if e.offset != expect {
                return Err(bad(format!(
                    "manifest entry {} at offset {}, expected {expect}",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = (e.offset + n) * 4;
            if end > payload.len() {
                return Err(bad(format!("payload truncated inside {}", e.name)));
            }
            let data = payload[e.offset * 4..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
            expect += n;
        }
        if expect * 4 != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                expect * 4
            )));
        }
        let [min, max] = header.aabb;
        Ok(Self {
            config: header.config,
            step: header.step,
            scene: header.scene,
            mode: RenderMode::parse(&header.mode).map_err(|e| bad(e.to_string()))?,
            aabb: Aabb { min, max },
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the configuration, model and occupancy grid.
    pub fn restore(&self, path: &Path) -> Result<(RunConfig, Model<f32>, OccupancyGrid)> {
        let bad = |msg: String| Error::format(path, msg);
        let config = RunConfig::parse(&self.config).map_err(|e| bad(format!("embedded config: {e}")))?;
        let mut model = Model::new(
            config.grid.clone(),
            config.bundle.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let find = |name: &str| self.arrays.iter().find(|a| a.name == name);
        for p in model.params_mut() {
            let a = find(&p.name).ok_or_else(|| bad(format!("missing array {}", p.name)))?;
            if a.shape != p.shape {
                return Err(bad(format!(
                    "{}: shape {:?}, model expects {:?}",
                    p.name, a.shape, p.shape
                )));
            }
            p.values.copy_from_slice(&a.data);
        }
        let t = &config.train;
        let mut occ = OccupancyGrid::new(
            t.occupancy_resolution,
            self.aabb,
            t.occupancy_decay,
            t.occupancy_threshold,
        );
        let n = occ.voxel_count();
        let ema = find(OCC_EMA).ok_or_else(|| bad(format!("missing array {OCC_EMA}")))?;
        let bits = find(OCC_BITS).ok_or_else(|| bad(format!("missing array {OCC_BITS}")))?;
        if ema.data.len() != n || bits.data.len() != n {
            return Err(bad("occupancy arrays do not match occupancy_resolution".into()));
        }
        occ.density_ema.copy_from_slice(&ema.data);
        occ.bits = bits.data.iter().map(|&v| v != 0.0).collect();
        Ok((config, model, occ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::toy();
        config.grid.levels = 2;
        config.grid.table_size = 1 << 8;
        let model = Model::new(
            config.grid.clone(),
            config.bundle.clone(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let occ = OccupancyGrid::new(config.train.occupancy_resolution, Aabb::cube(0.5), 0.95, 0.01);
        Checkpoint::capture(&config, &model, &occ, 17, "scenes/toy", RenderMode::Vfr)
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_magic_and_length() {
        let mut bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("x")),
            Err(Error::Format { .. })
        ));
        bytes.push(0);
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        bytes.truncate(bytes.len() - 9);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn restore_reproduces_parameters() {
        let c = sample();
        let (_, model, occ) = c.restore(Path::new("x")).unwrap();
        let again = Checkpoint::capture(
            &RunConfig::parse(&c.config).unwrap(),
            &model,
            &occ,
            c.step,
            &c.scene,
            c.mode,
        );
        assert_eq!(again, c);
    }
}
