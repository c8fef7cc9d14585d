use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvBlock, Fmap, Param};
pub use super::layers::ParamKind;
use super::{DetectorOutput, GridSpec, OutputGrad};
use crate::{Error, Result};

const FORMAT: &str = "clod-detector-v1";

/// Architecture and label space of a [`Detector`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub grid: GridSpec,
    pub num_classes: usize,
    /// DFL bins per side (`L`).
    pub reg_max: usize,
    /// Output channels of each stride-2 stage; stage `i` runs at stride `2^(i+1)`.
    pub widths: Vec<usize>,
    pub head_width: usize,
    pub class_names: Vec<String>,
    pub init_seed: u64,
}

impl DetectorConfig {
    /// Desk-scale detector: 64 px input, strides 8 and 16, `L = 16`.
    pub fn desk(class_names: Vec<String>) -> Self {
        Self {
            grid: GridSpec::desk(),
            num_classes: class_names.len(),
            reg_max: 16,
            widths: vec![8, 16, 32, 64],
            head_width: 32,
            class_names,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.reg_max < 2 {
            return Err(Error::config("reg_max (L) must be at least 2"));
        }
        for &s in self.grid.strides() {
            if !s.is_power_of_two() || s < 2 {
                return Err(Error::config(format!("stride {s} is not a power of two ≥ 2")));
            }
            let stage = s.trailing_zeros() as usize;
            if stage > self.widths.len() {
                return Err(Error::config(format!(
                    "stride {s} needs {stage} backbone stages, only {} widths given",
                    self.widths.len()
                )));
            }
        }
        if self.widths.iter().chain([&self.head_width]).any(|&w| w == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Head {
    cls_conv: ConvBlock,
    cls_pred: Conv2d,
    reg_conv: ConvBlock,
    reg_pred: Conv2d,
}

/// Small convolutional backbone with one decoupled head per detection scale.
///
/// Each backbone stage halves the resolution; stages whose stride is a
/// detection stride get an extra stride-1 block and feed a head. Heads emit
/// `Nc` class logits and `4·L` DFL logits per cell.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    blocks: Vec<ConvBlock>,
    /// For each detection level, the index of the backbone block it reads.
    taps: Vec<usize>,
    heads: Vec<Head>,
}

struct HeadCache {
    cls_conv: super::layers::BlockCache,
    cls_cols: Vec<Vec<f32>>,
    reg_conv: super::layers::BlockCache,
    reg_cols: Vec<Vec<f32>>,
    cls_hidden: (usize, usize),
}

/// Output of a training-mode forward pass. Keep it alive until
/// [`Detector::backward`] consumes the matching gradients.
pub struct TrainForward {
    pub outputs: Vec<DetectorOutput>,
    blocks: Vec<super::layers::BlockCache>,
    block_dims: Vec<(usize, usize, usize)>,
    heads: Vec<HeadCache>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let max_stage = config
            .grid
            .strides()
            .iter()
            .map(|s| s.trailing_zeros() as usize)
            .max()
            .expect("non-empty strides");
        let mut blocks = Vec::new();
        let mut stage_tap = vec![None; max_stage + 1];
        let mut in_ch = 3;
        for stage in 1..=max_stage {
            let w = config.widths[stage - 1];
            blocks.push(ConvBlock::new(in_ch, w, 3, 2, &mut rng));
            in_ch = w;
            if config.grid.strides().contains(&(1 << stage)) {
                blocks.push(ConvBlock::new(w, w, 3, 1, &mut rng));
                stage_tap[stage] = Some(blocks.len() - 1);
            }
        }
        // class bias starts at a 1% prior; DFL bias is shift-invariant
        let prior = (0.01f32 / 0.99).ln();
        let mut taps = Vec::new();
        let mut heads = Vec::new();
        for &s in config.grid.strides() {
            let stage = s.trailing_zeros() as usize;
            let tap = stage_tap[stage].expect("tap exists");
            let ch = config.widths[stage - 1];
            let hw = config.head_width;
            taps.push(tap);
            heads.push(Head {
                cls_conv: ConvBlock::new(ch, hw, 3, 1, &mut rng),
                cls_pred: Conv2d::new(hw, config.num_classes, 1, 1, Some(prior), 0.1, &mut rng),
                reg_conv: ConvBlock::new(ch, hw, 3, 1, &mut rng),
                reg_pred: Conv2d::new(hw, 4 * config.reg_max, 1, 1, Some(1.0), 0.1, &mut rng),
            });
        }
        Ok(Self {
            config,
            blocks,
            taps,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn reg_max(&self) -> usize {
        self.config.reg_max
    }

    fn to_fmap(&self, image: &Array3<f32>) -> Result<Fmap> {
        let d = self.config.grid.image_size();
        if image.dim() != (3, d, d) {
            return Err(Error::config(format!(
                "image shape {:?} does not match expected (3, {d}, {d})",
                image.dim()
            )));
        }
        Ok(Fmap {
            c: 3,
            h: d,
            w: d,
            data: image.iter().cloned().collect(),
        })
    }

    fn assemble(&self, cls: &[Fmap], reg: &[Fmap]) -> Result<DetectorOutput> {
        let grid = self.config.grid.clone();
        let n = grid.num_anchors();
        let (nc, l) = (self.config.num_classes, self.config.reg_max);
        let mut class_logits = Array2::zeros((n, nc));
        let mut dfl_logits = Array3::zeros((n, 4, l));
        for (level, (c, r)) in cls.iter().zip(reg).enumerate() {
            let range = grid.level_range(level);
            let plane = c.plane();
            for (pos, a) in range.enumerate() {
                for k in 0..nc {
                    class_logits[[a, k]] = c.data[k * plane + pos] as f64;
                }
                for side in 0..4 {
                    for j in 0..l {
                        dfl_logits[[a, side, j]] = r.data[(side * l + j) * plane + pos] as f64;
                    }
                }
            }
        }
        DetectorOutput::new(grid, class_logits, dfl_logits)
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, image: &Array3<f32>) -> Result<DetectorOutput> {
        let mut x = self.to_fmap(image)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward_eval(&x);
            if self.taps.contains(&i) {
                taps.push((i, x.clone()));
            }
        }
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for (head, &tap) in self.heads.iter().zip(&self.taps) {
            let feat = &taps.iter().find(|(i, _)| *i == tap).expect("tap").1;
            let h = head.cls_conv.forward_eval(feat);
            cls.push(head.cls_pred.forward(&h).0);
            let h = head.reg_conv.forward_eval(feat);
            reg.push(head.reg_pred.forward(&h).0);
        }
        self.assemble(&cls, &reg)
    }

    /// Training-mode forward pass over a batch (batch statistics, running
    /// statistics updated).
    pub fn forward_train(&mut self, images: &[&Array3<f32>]) -> Result<TrainForward> {
        if images.is_empty() {
            return Err(Error::config("empty training batch"));
        }
        let mut xs: Vec<Fmap> = images
            .iter()
            .map(|im| self.to_fmap(im))
            .collect::<Result<_>>()?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut block_dims = Vec::with_capacity(self.blocks.len());
        let mut tap_feats: Vec<(usize, Vec<Fmap>)> = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (ys, cache) = block.forward_train(&xs);
            block_dims.push((ys[0].c, ys[0].h, ys[0].w));
            block_caches.push(cache);
            if self.taps.contains(&i) {
                tap_feats.push((i, ys.clone()));
            }
            xs = ys;
        }
        let mut head_caches = Vec::with_capacity(self.heads.len());
        let mut cls_out: Vec<Vec<Fmap>> = Vec::new();
        let mut reg_out: Vec<Vec<Fmap>> = Vec::new();
        for (head, &tap) in self.heads.iter_mut().zip(&self.taps) {
            let feats = &tap_feats.iter().find(|(i, _)| *i == tap).expect("tap").1;
            let (hc, cls_conv) = head.cls_conv.forward_train(feats);
            let (cls, cls_cols): (Vec<_>, Vec<_>) = hc.iter().map(|h| head.cls_pred.forward(h)).unzip();
            let (hr, reg_conv) = head.reg_conv.forward_train(feats);
            let (reg, reg_cols): (Vec<_>, Vec<_>) = hr.iter().map(|h| head.reg_pred.forward(h)).unzip();
            head_caches.push(HeadCache {
                cls_conv,
                cls_cols,
                reg_conv,
                reg_cols,
                cls_hidden: (hc[0].h, hc[0].w),
            });
            cls_out.push(cls);
            reg_out.push(reg);
        }
        let outputs = (0..images.len())
            .map(|b| {
                let c: Vec<Fmap> = cls_out.iter().map(|lv| lv[b].clone()).collect();
                let r: Vec<Fmap> = reg_out.iter().map(|lv| lv[b].clone()).collect();
                self.assemble(&c, &r)
            })
            .collect::<Result<_>>()?;
        Ok(TrainForward {
            outputs,
            blocks: block_caches,
            block_dims,
            heads: head_caches,
        })
    }

    /// Accumulates parameter gradients for `dL/d(outputs)`.
    pub fn backward(&mut self, forward: TrainForward, grads: &[OutputGrad]) -> Result<()> {
        if grads.len() != forward.outputs.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} outputs",
                grads.len(),
                forward.outputs.len()
            )));
        }
        let grid = self.config.grid.clone();
        let (nc, l) = (self.config.num_classes, self.config.reg_max);
        let mut tap_grads: Vec<Option<Vec<Fmap>>> = vec![None; self.blocks.len()];
        for (level, (head, cache)) in self.heads.iter_mut().zip(&forward.heads).enumerate() {
            let side = grid.grid_sides()[level];
            let plane = side * side;
            let range = grid.level_range(level);
            let (hh, hw) = cache.cls_hidden;
            let mut d_cls_hidden = Vec::with_capacity(grads.len());
            let mut d_reg_hidden = Vec::with_capacity(grads.len());
            for (b, g) in grads.iter().enumerate() {
                let mut dc = Fmap::zeros(nc, side, side);
                let mut dr = Fmap::zeros(4 * l, side, side);
                for (pos, a) in range.clone().enumerate() {
                    for k in 0..nc {
                        dc.data[k * plane + pos] = g.class_logits[[a, k]] as f32;
                    }
                    for s in 0..4 {
                        for j in 0..l {
                            dr.data[(s * l + j) * plane + pos] = g.dfl_logits[[a, s, j]] as f32;
                        }
                    }
                }
                d_cls_hidden.push(head.cls_pred.backward(hh, hw, &cache.cls_cols[b], &dc));
                d_reg_hidden.push(head.reg_pred.backward(hh, hw, &cache.reg_cols[b], &dr));
            }
            let d_feat_c = head.cls_conv.backward(&cache.cls_conv, d_cls_hidden);
            let d_feat_r = head.reg_conv.backward(&cache.reg_conv, d_reg_hidden);
            let tap = self.taps[level];
            let slot = tap_grads[tap].get_or_insert_with(|| {
                let (c, h, w) = forward.block_dims[tap];
                vec![Fmap::zeros(c, h, w); grads.len()]
            });
            for (acc, (a, b)) in slot.iter_mut().zip(d_feat_c.iter().zip(&d_feat_r)) {
                for ((x, y), z) in acc.data.iter_mut().zip(&a.data).zip(&b.data) {
                    *x += y + z;
                }
            }
        }
        let mut upstream: Option<Vec<Fmap>> = None;
        for i in (0..self.blocks.len()).rev() {
            let mut dy = match (upstream.take(), tap_grads[i].take()) {
                (Some(mut u), Some(t)) => {
                    for (a, b) in u.iter_mut().zip(&t) {
                        for (x, y) in a.data.iter_mut().zip(&b.data) {
                            *x += y;
                        }
                    }
                    u
                }
                (Some(u), None) => u,
                (None, Some(t)) => t,
                // nothing downstream of the deepest unused block
                (None, None) => continue,
            };
            if dy.is_empty() {
                continue;
            }
            dy = self.blocks[i].backward(&forward.blocks[i], dy);
            if i > 0 {
                upstream = Some(dy);
            }
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        for h in &mut self.heads {
            out.extend(h.cls_conv.params_mut());
            out.push(&mut h.cls_pred.weight);
            out.extend(h.cls_pred.bias.as_mut());
            out.extend(h.reg_conv.params_mut());
            out.push(&mut h.reg_pred.weight);
            out.extend(h.reg_pred.bias.as_mut());
        }
        out
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for b in &self.blocks {
            out.extend(b.params());
        }
        for h in &self.heads {
            out.extend(h.cls_conv.params());
            out.push(&h.cls_pred.weight);
            out.extend(h.cls_pred.bias.as_ref());
            out.extend(h.reg_conv.params());
            out.push(&h.reg_pred.weight);
            out.extend(h.reg_pred.bias.as_ref());
        }
        out
    }

    fn norm_stats(&self) -> Vec<&Vec<f32>> {
        let mut out = Vec::new();
        let blocks = self.blocks.iter().chain(
            self.heads
                .iter()
                .flat_map(|h| [&h.cls_conv, &h.reg_conv]),
        );
        for b in blocks {
            out.push(&b.bn.running_mean);
            out.push(&b.bn.running_var);
        }
        out
    }

    fn norm_stats_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        let blocks = self.blocks.iter_mut().chain(
            self.heads
                .iter_mut()
                .flat_map(|h| [&mut h.cls_conv, &mut h.reg_conv]),
        );
        for b in blocks {
            out.push(&mut b.bn.running_mean);
            out.push(&mut b.bn.running_var);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Flat copy of every parameter and running statistic.
    pub fn state_vector(&self) -> Vec<f32> {
        let mut v = Vec::new();
        for p in self.params() {
            v.extend_from_slice(&p.value);
        }
        for s in self.norm_stats() {
            v.extend_from_slice(s);
        }
        v
    }

    fn load_state_vector(&mut self, v: &[f32]) -> Result<()> {
        let expected = self.state_vector().len();
        if v.len() != expected {
            return Err(Error::shape(format!(
                "state has {} values, model needs {expected}",
                v.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        for s in self.norm_stats_mut() {
            let n = s.len();
            s.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of the full state.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.state_vector() {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Writes little-endian `f32` state to `path` and a JSON sidecar
    /// (`path` with a `.json` extension) holding the [`DetectorConfig`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let state = self.state_vector();
        let mut bytes = Vec::with_capacity(state.len() * 4);
        for x in &state {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&bytes)?;
        let sidecar = Sidecar {
            format: FORMAT.to_string(),
            num_values: state.len(),
            config: self.config.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if sidecar.format != FORMAT {
            return Err(Error::config(format!("unknown model format {}", sidecar.format)));
        }
        let mut model = Detector::new(sidecar.config)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != sidecar.num_values * 4 {
            return Err(Error::shape(format!(
                "{} bytes on disk, sidecar declares {} values",
                bytes.len(),
                sidecar.num_values
            )));
        }
        let state: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.load_state_vector(&state)?;
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    num_values: usize,
    config: DetectorConfig,
}
