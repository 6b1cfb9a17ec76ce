//! Trainable joint-angle regressor: a small 3D convolutional encoder, a
//! residual fully connected regressor, rotation-representation heads and
//! losses, all with hand-written reverse-mode gradients, plus Adam training,
//! checkpoints and the representation/supervision/resolution ablation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Target, DEFAULT_SIDE_MM};
use crate::error::{Error, Result};
use crate::geomcam::{aggregate, aggregate_backward, AggregatedVolume, RootMode, ViewVolume};
use crate::rotmath::{
    axis_rotation, axis_rotation_derivative, euler_to_matrix_raw, matrix_to_euler, mpjae, quat_to_matrix_raw,
    wrap_diff_deg, AngleSet, EulerConvention, EulerTriple, RotationMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "euler")]
    Euler,
    #[serde(rename = "quat")]
    Quaternion,
    #[serde(rename = "6d")]
    SixD,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Representation::Euler, Representation::Quaternion, Representation::SixD];

    pub fn dim(self) -> usize {
        match self {
            Representation::Euler => 3,
            Representation::Quaternion => 4,
            Representation::SixD => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::Euler => "euler",
            Representation::Quaternion => "quat",
            Representation::SixD => "6d",
        }
    }

    /// Factor applied to the head output. Euler heads predict radians and
    /// report degrees.
    pub fn output_scale(self) -> f64 {
        match self {
            Representation::Euler => 180.0 / std::f64::consts::PI,
            _ => 1.0,
        }
    }

    fn identity(self) -> &'static [f64] {
        match self {
            Representation::Euler => &[0.0, 0.0, 0.0],
            Representation::Quaternion => &[1.0, 0.0, 0.0, 0.0],
            Representation::SixD => &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Representation::Euler),
            "quat" | "quaternion" => Ok(Representation::Quaternion),
            "6d" | "sixd" => Ok(Representation::SixD),
            _ => Err(Error::invalid(format!("unknown representation `{s}` (euler, quat, 6d)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Direct,
    So3,
}

impl Supervision {
    pub const ALL: [Supervision; 2] = [Supervision::Direct, Supervision::So3];

    pub fn name(self) -> &'static str {
        match self {
            Supervision::Direct => "direct",
            Supervision::So3 => "so3",
        }
    }
}

impl FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Supervision::Direct),
            "so3" => Ok(Supervision::So3),
            _ => Err(Error::invalid(format!("unknown supervision `{s}` (direct, so3)"))),
        }
    }
}

/// How direct Euler supervision treats the target's 360° ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EulerTargetPolicy {
    /// Each target component is moved to the branch nearest the prediction.
    #[default]
    NearestBranch,
    /// Targets are used exactly as stored.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub representation: Representation,
    pub supervision: Supervision,
    pub euler_targets: EulerTargetPolicy,
    pub convention: EulerConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub representation: Representation,
    pub supervision: Supervision,
    pub lr: f64,
    pub anneal_factor: f64,
    /// 1-based epoch from which the learning rate is `lr · anneal_factor`.
    pub anneal_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub root_mode: RootMode,
    /// Voxels per cube edge, `B`.
    pub side: usize,
    pub side_mm: f64,
    pub hidden: usize,
    pub batch_norm: bool,
    /// Keep encoder parameters fixed.
    pub freeze_encoder: bool,
    /// Fraction of trailing frames held out for validation.
    pub val_fraction: f64,
    #[serde(default)]
    pub euler_targets: EulerTargetPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            representation: Representation::SixD,
            supervision: Supervision::So3,
            lr: 1e-3,
            anneal_factor: 0.1,
            anneal_epoch: 12,
            epochs: 15,
            batch_size: 8,
            seed: 0,
            root_mode: RootMode::Local,
            side: 32,
            side_mm: DEFAULT_SIDE_MM,
            hidden: 256,
            batch_norm: true,
            freeze_encoder: false,
            val_fraction: 0.2,
            euler_targets: EulerTargetPolicy::NearestBranch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        blocks_for_side(self.side)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.anneal_epoch >= self.epochs {
            return Err(Error::invalid(format!(
                "anneal epoch {} must be below the epoch count {}",
                self.anneal_epoch, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.anneal_factor >= 0.0 && self.anneal_factor.is_finite()) {
            return Err(Error::invalid("learning rate and anneal factor must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid("batch size and hidden width must be positive"));
        }
        if !(self.side_mm > 0.0) {
            return Err(Error::invalid("side_mm must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.anneal_epoch {
            self.lr * self.anneal_factor
        } else {
            self.lr
        }
    }

    pub fn loss_spec(&self, convention: EulerConvention) -> LossSpec {
        LossSpec {
            representation: self.representation,
            supervision: self.supervision,
            euler_targets: self.euler_targets,
            convention,
        }
    }
}

/// Encoder depth `N` for cube side `B = 2^(N+1)`.
pub fn blocks_for_side(side: usize) -> Result<usize> {
    if side < 4 || !side.is_power_of_two() {
        return Err(Error::invalid(format!("volume side {side} must be a power of two >= 4")));
    }
    Ok(side.trailing_zeros() as usize - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub joints: usize,
    pub side: usize,
    pub hidden: usize,
    pub representation: Representation,
    pub batch_norm: bool,
    pub euler_convention: String,
}

impl Architecture {
    pub fn blocks(&self) -> usize {
        blocks_for_side(self.side).expect("validated side")
    }

    pub fn output_dim(&self) -> usize {
        self.joints * self.representation.dim()
    }

    pub fn convention(&self) -> EulerConvention {
        self.euler_convention.parse().unwrap_or(EulerConvention::XYZ)
    }
}

#[derive(Debug, Clone, Copy)]
struct LinOff {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnOff {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    n: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    enc: Vec<(usize, usize)>,
    stem: LinOff,
    stem_bn: Option<BnOff>,
    blocks: [(LinOff, Option<BnOff>, LinOff, Option<BnOff>); 2],
    head: LinOff,
}

/// Name, shape and position of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub encoder: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct LayoutBuilder {
    params: Vec<ParamEntry>,
    buffers: Vec<ParamEntry>,
    np: usize,
    nb: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, encoder: bool) -> usize {
        let e = ParamEntry {
            name,
            shape,
            offset: self.np,
            encoder,
        };
        self.np += e.len();
        self.params.push(e);
        self.np - self.params.last().unwrap().len()
    }

    fn buffer(&mut self, name: String, n: usize) -> usize {
        let off = self.nb;
        self.buffers.push(ParamEntry {
            name,
            shape: vec![n],
            offset: off,
            encoder: false,
        });
        self.nb += n;
        off
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinOff {
        let w = self.param(format!("{name}.weight"), vec![out, inp], false);
        let b = self.param(format!("{name}.bias"), vec![out], false);
        LinOff { w, b, out, inp }
    }

    fn bn(&mut self, name: &str, n: usize, enabled: bool) -> Option<BnOff> {
        if !enabled {
            return None;
        }
        Some(BnOff {
            gamma: self.param(format!("{name}.gamma"), vec![n], false),
            beta: self.param(format!("{name}.beta"), vec![n], false),
            mean: self.buffer(format!("{name}.running_mean"), n),
            var: self.buffer(format!("{name}.running_var"), n),
            n,
        })
    }
}

fn build_layout(a: &Architecture) -> (Offsets, Vec<ParamEntry>, Vec<ParamEntry>) {
    let j = a.joints;
    let h = a.hidden;
    let mut lb = LayoutBuilder {
        params: Vec::new(),
        buffers: Vec::new(),
        np: 0,
        nb: 0,
    };
    let enc = (0..a.blocks())
        .map(|i| {
            (
                lb.param(format!("encoder.{i}.weight"), vec![j, j, 3, 3, 3], true),
                lb.param(format!("encoder.{i}.bias"), vec![j], true),
            )
        })
        .collect();
    let stem = lb.linear("stem", h, 8 * j);
    let stem_bn = lb.bn("stem.bn", h, a.batch_norm);
    let mut block = |k: usize| {
        let fa = lb.linear(&format!("block.{k}.fc1"), h, h);
        let ba = lb.bn(&format!("block.{k}.bn1"), h, a.batch_norm);
        let fb = lb.linear(&format!("block.{k}.fc2"), h, h);
        let bb = lb.bn(&format!("block.{k}.bn2"), h, a.batch_norm);
        (fa, ba, fb, bb)
    };
    let blocks = [block(0), block(1)];
    let head = lb.linear("head", a.output_dim(), h);
    (
        Offsets {
            enc,
            stem,
            stem_bn,
            blocks,
            head,
        },
        lb.params,
        lb.buffers,
    )
}

/// Encoder plus regressor with flat parameter storage.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    /// Trainable parameters, laid out as [`Network::param_entries`].
    pub params: Vec<f64>,
    /// Batch-norm running statistics.
    pub buffers: Vec<f64>,
    off: Offsets,
    entries: Vec<ParamEntry>,
    buffer_entries: Vec<ParamEntry>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.buffers == other.buffers
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl Network {
    /// All-zero parameters (unit batch-norm scale and variance).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        blocks_for_side(arch.side)?;
        if arch.joints == 0 || arch.hidden == 0 {
            return Err(Error::invalid("network needs at least one joint and one hidden unit"));
        }
        let (off, entries, buffer_entries) = build_layout(&arch);
        let np = entries.iter().map(|e| e.len()).sum();
        let nb = buffer_entries.iter().map(|e| e.len()).sum();
        let mut net = Network {
            arch,
            params: vec![0.0; np],
            buffers: vec![0.0; nb],
            off,
            entries,
            buffer_entries,
        };
        for bn in net.bn_layers() {
            net.params[bn.gamma..bn.gamma + bn.n].fill(1.0);
            net.buffers[bn.var..bn.var + bn.n].fill(1.0);
        }
        Ok(net)
    }

    /// He-initialized weights, zero biases, and a head biased towards the
    /// identity rotation.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let j = net.arch.joints;
        for &(w, _) in &net.off.enc.clone() {
            fill_normal(&mut net.params[w..w + j * j * 27], (2.0 / (27 * j) as f64).sqrt(), rng);
        }
        let mut lins = vec![net.off.stem];
        for b in &net.off.blocks {
            lins.push(b.0);
            lins.push(b.2);
        }
        for l in lins {
            fill_normal(&mut net.params[l.w..l.w + l.out * l.inp], (2.0 / l.inp as f64).sqrt(), rng);
        }
        let head = net.off.head;
        fill_normal(
            &mut net.params[head.w..head.w + head.out * head.inp],
            0.1 / (head.inp as f64).sqrt(),
            rng,
        );
        let ident = net.arch.representation.identity();
        for jj in 0..j {
            let d = ident.len();
            net.params[head.b + jj * d..head.b + (jj + 1) * d].copy_from_slice(ident);
        }
        Ok(net)
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn buffer_entries(&self) -> &[ParamEntry] {
        &self.buffer_entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.entry(name)?.clone();
        Some(&mut self.params[e.offset..e.offset + e.len()])
    }

    /// Number of leading parameters that belong to the encoder.
    pub fn encoder_len(&self) -> usize {
        self.entries.iter().filter(|e| e.encoder).map(|e| e.len()).sum()
    }

    fn bn_layers(&self) -> Vec<BnOff> {
        let mut v: Vec<BnOff> = self.off.stem_bn.into_iter().collect();
        for b in &self.off.blocks {
            v.extend(b.1);
            v.extend(b.3);
        }
        v
    }

    /// Name of the layer owning flat parameter index `i`.
    pub fn layer_of(&self, i: usize) -> &str {
        self.entries
            .iter()
            .find(|e| (e.offset..e.offset + e.len()).contains(&i))
            .map_or("?", |e| e.name.as_str())
    }
}

fn fill_normal(xs: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).expect("finite std");
    for x in xs {
        *x = n.sample(rng);
    }
}

// ---------------------------------------------------------------------------
// encoder

/// Reorders `[o][i][kx][ky][kz]` to `[k][i][o]`.
fn kernel_to_kio(w: &[f64], c: usize) -> Vec<f64> {
    let mut t = vec![0.0; 27 * c * c];
    for o in 0..c {
        for i in 0..c {
            for k in 0..27 {
                t[(k * c + i) * c + o] = w[(o * c + i) * 27 + k];
            }
        }
    }
    t
}

fn kio_to_kernel(t: &[f64], c: usize, out: &mut [f64]) {
    for o in 0..c {
        for i in 0..c {
            for k in 0..27 {
                out[(o * c + i) * 27 + k] += t[(k * c + i) * c + o];
            }
        }
    }
}

/// Same-size 3×3×3 convolution with zero padding, channels last.
fn conv3d(input: &[f64], s: usize, c: usize, kio: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s * s * s * c];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let ob = ((x * s + y) * s + z) * c;
                let acc = &mut out[ob..ob + c];
                acc.copy_from_slice(bias);
                for dx in 0..3 {
                    let Some(xx) = (x + dx).checked_sub(1).filter(|v| *v < s) else { continue };
                    for dy in 0..3 {
                        let Some(yy) = (y + dy).checked_sub(1).filter(|v| *v < s) else { continue };
                        for dz in 0..3 {
                            let Some(zz) = (z + dz).checked_sub(1).filter(|v| *v < s) else { continue };
                            let k = (dx * 3 + dy) * 3 + dz;
                            let ib = ((xx * s + yy) * s + zz) * c;
                            for i in 0..c {
                                let v = input[ib + i];
                                if v == 0.0 {
                                    continue;
                                }
                                let row = &kio[(k * c + i) * c..(k * c + i + 1) * c];
                                for (a, w) in acc.iter_mut().zip(row) {
                                    *a += v * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward(
    input: &[f64],
    s: usize,
    c: usize,
    kio: &[f64],
    gout: &[f64],
    g_kio: &mut [f64],
    gbias: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let ob = ((x * s + y) * s + z) * c;
                let g = &gout[ob..ob + c];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for (b, gv) in gbias.iter_mut().zip(g) {
                    *b += gv;
                }
                for dx in 0..3 {
                    let Some(xx) = (x + dx).checked_sub(1).filter(|v| *v < s) else { continue };
                    for dy in 0..3 {
                        let Some(yy) = (y + dy).checked_sub(1).filter(|v| *v < s) else { continue };
                        for dz in 0..3 {
                            let Some(zz) = (z + dz).checked_sub(1).filter(|v| *v < s) else { continue };
                            let k = (dx * 3 + dy) * 3 + dz;
                            let ib = ((xx * s + yy) * s + zz) * c;
                            for i in 0..c {
                                let base = (k * c + i) * c;
                                let v = input[ib + i];
                                if v != 0.0 {
                                    for (gw, gv) in g_kio[base..base + c].iter_mut().zip(g) {
                                        *gw += v * gv;
                                    }
                                }
                                if let Some(gin) = gin.as_deref_mut() {
                                    let row = &kio[base..base + c];
                                    gin[ib + i] += row.iter().zip(g).map(|(w, gv)| w * gv).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2×2 average pooling with stride 2, channels last.
fn avg_pool(input: &[f64], s: usize, c: usize) -> Vec<f64> {
    let h = s / 2;
    let mut out = vec![0.0; h * h * h * c];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let ib = ((x * s + y) * s + z) * c;
                let ob = (((x / 2) * h + y / 2) * h + z / 2) * c;
                for ch in 0..c {
                    out[ob + ch] += input[ib + ch] * 0.125;
                }
            }
        }
    }
    out
}

fn avg_pool_backward(gout: &[f64], s: usize, c: usize) -> Vec<f64> {
    let h = s / 2;
    let mut g = vec![0.0; s * s * s * c];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let ib = ((x * s + y) * s + z) * c;
                let ob = (((x / 2) * h + y / 2) * h + z / 2) * c;
                for ch in 0..c {
                    g[ib + ch] = gout[ob + ch] * 0.125;
                }
            }
        }
    }
    g
}

struct EncoderCache {
    /// Input of every block.
    inputs: Vec<Vec<f64>>,
    /// Convolution output (before ReLU) of every block.
    pre: Vec<Vec<f64>>,
}

struct PreparedEncoder {
    kio: Vec<Vec<f64>>,
}

impl Network {
    fn prepare_encoder(&self) -> PreparedEncoder {
        let c = self.arch.joints;
        PreparedEncoder {
            kio: self
                .off
                .enc
                .iter()
                .map(|&(w, _)| kernel_to_kio(&self.params[w..w + 27 * c * c], c))
                .collect(),
        }
    }

    fn encode_cached(&self, prep: &PreparedEncoder, volume: &[f64]) -> (Vec<f64>, EncoderCache) {
        let c = self.arch.joints;
        let mut s = self.arch.side;
        let mut x = volume.to_vec();
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        for (blk, &(_, b)) in self.off.enc.iter().enumerate() {
            let pre = conv3d(&x, s, c, &prep.kio[blk], &self.params[b..b + c]);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let pooled = avg_pool(&act, s, c);
            cache.inputs.push(std::mem::replace(&mut x, pooled));
            cache.pre.push(pre);
            s /= 2;
        }
        (x, cache)
    }

    /// Accumulates encoder parameter gradients into `grads` (full-length
    /// vector) and optionally returns the gradient with respect to the input.
    fn encode_backward(
        &self,
        prep: &PreparedEncoder,
        cache: &EncoderCache,
        gout: &[f64],
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let c = self.arch.joints;
        let n = self.off.enc.len();
        let mut g = gout.to_vec();
        for blk in (0..n).rev() {
            let s = self.arch.side >> blk;
            let (w, b) = self.off.enc[blk];
            let mut gpre = avg_pool_backward(&g, s, c);
            for (gv, p) in gpre.iter_mut().zip(&cache.pre[blk]) {
                if *p <= 0.0 {
                    *gv = 0.0;
                }
            }
            let mut g_kio = vec![0.0; 27 * c * c];
            let need_in = blk > 0 || want_input;
            let mut gin = if need_in { vec![0.0; s * s * s * c] } else { Vec::new() };
            conv3d_backward(
                &cache.inputs[blk],
                s,
                c,
                &prep.kio[blk],
                &gpre,
                &mut g_kio,
                &mut grads[b..b + c],
                if need_in { Some(&mut gin) } else { None },
            );
            kio_to_kernel(&g_kio, c, &mut grads[w..w + 27 * c * c]);
            g = gin;
        }
        if want_input {
            Some(g)
        } else {
            None
        }
    }
}

/// Encoder forward pass: `B×B×B×J` to `2×2×2×J` (flattened, channels last).
pub fn encode(net: &Network, volume: &AggregatedVolume) -> Result<Vec<f64>> {
    if volume.side != net.arch.side || volume.channels != net.arch.joints {
        return Err(Error::invalid(format!(
            "volume is {}³×{}, network expects {}³×{}",
            volume.side, volume.channels, net.arch.side, net.arch.joints
        )));
    }
    Ok(net.encode_cached(&net.prepare_encoder(), &volume.values).0)
}

// ---------------------------------------------------------------------------
// regressor

fn linear_fwd(params: &[f64], l: LinOff, x: &DMatrix<f64>) -> DMatrix<f64> {
    let w = DMatrix::from_row_slice(l.out, l.inp, &params[l.w..l.w + l.out * l.inp]);
    let mut y = x * w.transpose();
    for mut row in y.row_iter_mut() {
        for (v, b) in row.iter_mut().zip(&params[l.b..l.b + l.out]) {
            *v += b;
        }
    }
    y
}

fn linear_bwd(params: &[f64], l: LinOff, x: &DMatrix<f64>, gy: &DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
    let w = DMatrix::from_row_slice(l.out, l.inp, &params[l.w..l.w + l.out * l.inp]);
    let gw = gy.transpose() * x;
    for o in 0..l.out {
        for i in 0..l.inp {
            grads[l.w + o * l.inp + i] += gw[(o, i)];
        }
    }
    for (o, g) in grads[l.b..l.b + l.out].iter_mut().enumerate() {
        *g += gy.column(o).sum();
    }
    gy * w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

struct BnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn bn_fwd(
    params: &[f64],
    buffers: &mut [f64],
    bn: Option<BnOff>,
    x: DMatrix<f64>,
    mode: BnMode,
) -> (DMatrix<f64>, Option<BnCache>) {
    let Some(bn) = bn else { return (x, None) };
    let n = x.nrows();
    let mut xhat = x.clone();
    let mut inv_std = vec![0.0; bn.n];
    for f in 0..bn.n {
        let col = x.column(f);
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                buffers[bn.mean + f] = (1.0 - BN_MOMENTUM) * buffers[bn.mean + f] + BN_MOMENTUM * mean;
                buffers[bn.var + f] = (1.0 - BN_MOMENTUM) * buffers[bn.var + f] + BN_MOMENTUM * unbiased;
                (mean, var)
            }
            BnMode::Eval => (buffers[bn.mean + f], buffers[bn.var + f]),
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[f] = is;
        for r in 0..n {
            xhat[(r, f)] = (x[(r, f)] - mean) * is;
        }
    }
    let mut y = xhat.clone();
    for f in 0..bn.n {
        let (g, b) = (params[bn.gamma + f], params[bn.beta + f]);
        for r in 0..n {
            y[(r, f)] = g * y[(r, f)] + b;
        }
    }
    (y, Some(BnCache { xhat, inv_std }))
}

fn bn_bwd(params: &[f64], bn: Option<BnOff>, cache: &Option<BnCache>, gy: DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
    let (Some(bn), Some(cache)) = (bn, cache) else { return gy };
    let n = gy.nrows() as f64;
    let mut gx = gy.clone();
    for f in 0..bn.n {
        let gcol = gy.column(f);
        let xcol = cache.xhat.column(f);
        let sum_g: f64 = gcol.sum();
        let sum_gx: f64 = gcol.iter().zip(xcol.iter()).map(|(a, b)| a * b).sum();
        grads[bn.gamma + f] += sum_gx;
        grads[bn.beta + f] += sum_g;
        let k = params[bn.gamma + f] * cache.inv_std[f] / n;
        for r in 0..gy.nrows() {
            gx[(r, f)] = k * (n * gy[(r, f)] - sum_g - cache.xhat[(r, f)] * sum_gx);
        }
    }
    gx
}

fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

fn relu_bwd(pre: &DMatrix<f64>, g: DMatrix<f64>) -> DMatrix<f64> {
    g.zip_map(pre, |gv, p| if p > 0.0 { gv } else { 0.0 })
}

struct LayerCache {
    input: DMatrix<f64>,
    bn: Option<BnCache>,
    /// Batch-norm output, the ReLU input.
    pre: DMatrix<f64>,
}

struct RegressorCache {
    stem: LayerCache,
    blocks: Vec<(LayerCache, LayerCache)>,
    head_in: DMatrix<f64>,
}

impl Network {
    fn layer_fwd(&self, buffers: &mut [f64], l: LinOff, bn: Option<BnOff>, x: DMatrix<f64>, mode: BnMode) -> (DMatrix<f64>, LayerCache) {
        let z = linear_fwd(&self.params, l, &x);
        let (pre, bnc) = bn_fwd(&self.params, buffers, bn, z, mode);
        (relu(&pre), LayerCache { input: x, bn: bnc, pre })
    }

    fn layer_bwd(&self, l: LinOff, bn: Option<BnOff>, c: &LayerCache, g: DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
        let g = relu_bwd(&c.pre, g);
        let g = bn_bwd(&self.params, bn, &c.bn, g, grads);
        linear_bwd(&self.params, l, &c.input, &g, grads)
    }

    /// Regressor over a batch (rows are samples). Train mode updates the
    /// running statistics in `buffers`.
    fn regress_batch(&self, buffers: &mut [f64], x: DMatrix<f64>, mode: BnMode) -> (DMatrix<f64>, RegressorCache) {
        let (mut h, stem) = self.layer_fwd(buffers, self.off.stem, self.off.stem_bn, x, mode);
        let mut blocks = Vec::new();
        for &(fa, ba, fb, bb) in &self.off.blocks {
            let (a, ca) = self.layer_fwd(buffers, fa, ba, h.clone(), mode);
            let (b, cb) = self.layer_fwd(buffers, fb, bb, a, mode);
            h += b;
            blocks.push((ca, cb));
        }
        let out = linear_fwd(&self.params, self.off.head, &h) * self.arch.representation.output_scale();
        (
            out,
            RegressorCache {
                stem,
                blocks,
                head_in: h,
            },
        )
    }

    fn regress_backward(&self, cache: &RegressorCache, gout: &DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
        let g = gout * self.arch.representation.output_scale();
        let mut gh = linear_bwd(&self.params, self.off.head, &cache.head_in, &g, grads);
        for (k, &(fa, ba, fb, bb)) in self.off.blocks.iter().enumerate().rev() {
            let (ca, cb) = &cache.blocks[k];
            let ga = self.layer_bwd(fb, bb, cb, gh.clone(), grads);
            gh += self.layer_bwd(fa, ba, ca, ga, grads);
        }
        self.layer_bwd(self.off.stem, self.off.stem_bn, &cache.stem, gh, grads)
    }
}

/// Regressor forward for one feature vector (`8J`), eval-mode batch norm.
pub fn regress(net: &Network, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != 8 * net.arch.joints {
        return Err(Error::invalid(format!(
            "regressor expects {} features, got {}",
            8 * net.arch.joints,
            features.len()
        )));
    }
    let mut buffers = net.buffers.clone();
    let x = DMatrix::from_row_slice(1, features.len(), features);
    Ok(net.regress_batch(&mut buffers, x, BnMode::Eval).0.row(0).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// representation maps

fn rep_to_matrix(r: &[f64], kind: Representation, conv: EulerConvention) -> Result<Matrix3<f64>> {
    match kind {
        Representation::Euler => Ok(euler_to_matrix_raw([r[0], r[1], r[2]], conv)),
        Representation::Quaternion => {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
            if !(n > 1e-12) || !n.is_finite() {
                return Err(Error::DegenerateRepresentation("quaternion has (near-)zero norm".into()));
            }
            Ok(quat_to_matrix_raw([r[0] / n, r[1] / n, r[2] / n, r[3] / n]))
        }
        Representation::SixD => Ok(*crate::rotmath::sixd_to_matrix(&crate::rotmath::SixDRep::from_array(
            std::array::from_fn(|k| r[k]),
        ))?
        .matrix()),
    }
}

fn frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Gradient of `⟨G, f(r)⟩` with respect to `r` for one joint slice.
fn rep_backward(r: &[f64], kind: Representation, conv: EulerConvention, g: &Matrix3<f64>) -> Vec<f64> {
    match kind {
        Representation::Euler => {
            let [a0, a1, a2] = conv.order();
            let (m0, m1, m2) = (axis_rotation(a0, r[0]), axis_rotation(a1, r[1]), axis_rotation(a2, r[2]));
            let (d0, d1, d2) = (
                axis_rotation_derivative(a0, r[0]),
                axis_rotation_derivative(a1, r[1]),
                axis_rotation_derivative(a2, r[2]),
            );
            vec![frob(g, &(d0 * m1 * m2)), frob(g, &(m0 * d1 * m2)), frob(g, &(m0 * m1 * d2))]
        }
        Representation::Quaternion => {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
            let [w, x, y, z] = [r[0] / n, r[1] / n, r[2] / n, r[3] / n];
            let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
            let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
            let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
            let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
            let gq = [frob(g, &dw), frob(g, &dx), frob(g, &dy), frob(g, &dz)];
            let q = [w, x, y, z];
            let dot: f64 = gq.iter().zip(&q).map(|(a, b)| a * b).sum();
            (0..4).map(|k| (gq[k] - q[k] * dot) / n).collect()
        }
        Representation::SixD => {
            let a1 = Vector3::new(r[0], r[1], r[2]);
            let a2 = Vector3::new(r[3], r[4], r[5]);
            let n1 = a1.norm();
            let b1 = a1 / n1;
            let u = a2 - b1 * b1.dot(&a2);
            let nu = u.norm();
            let b2 = u / nu;
            let (g1, g2, g3) = (
                g.column(0).into_owned(),
                g.column(1).into_owned(),
                g.column(2).into_owned(),
            );
            // b3 = b1 × b2
            let mut gb1 = g1 + b2.cross(&g3);
            let gb2 = g2 + g3.cross(&b1);
            let gu = (gb2 - b2 * b2.dot(&gb2)) / nu;
            let ga2 = gu - b1 * b1.dot(&gu);
            gb1 -= gu * b1.dot(&a2) + a2 * b1.dot(&gu);
            let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
            vec![ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
        }
    }
}

/// Maps a flat `J·D` representation vector to `J` rotations.
pub fn map_to_so3(r: &[f64], kind: Representation, convention: EulerConvention) -> Result<Vec<RotationMatrix>> {
    let d = kind.dim();
    if r.len() % d != 0 {
        return Err(Error::invalid(format!("length {} is not a multiple of {d}", r.len())));
    }
    r.chunks(d)
        .map(|c| Ok(RotationMatrix::from_matrix_unchecked(rep_to_matrix(c, kind, convention)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// loss

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// `(1/J) Σ_j per_joint[j]`.
    pub total: f64,
    pub per_joint: Vec<f64>,
}

fn target_slice(t: &Target, kind: Representation, j: usize) -> &[f64] {
    match kind {
        Representation::Euler => &t.euler[j],
        Representation::Quaternion => &t.quat[j],
        Representation::SixD => &t.sixd[j],
    }
}

/// Loss of one sample and its gradient with respect to the prediction.
fn loss_grad(r: &[f64], t: &Target, spec: &LossSpec) -> Result<(LossValue, Vec<f64>)> {
    let kind = spec.representation;
    let d = kind.dim();
    let jn = t.joints();
    if r.len() != jn * d {
        return Err(Error::invalid(format!(
            "prediction has {} values, target needs {}",
            r.len(),
            jn * d
        )));
    }
    let inv_j = 1.0 / jn as f64;
    let mut per_joint = Vec::with_capacity(jn);
    let mut grad = vec![0.0; r.len()];
    for j in 0..jn {
        let rj = &r[j * d..(j + 1) * d];
        let gj = &mut grad[j * d..(j + 1) * d];
        match spec.supervision {
            Supervision::Direct => {
                let raw = target_slice(t, kind, j);
                let mut tj: Vec<f64> = raw.to_vec();
                match kind {
                    Representation::Euler if spec.euler_targets == EulerTargetPolicy::NearestBranch => {
                        for (tv, rv) in tj.iter_mut().zip(rj) {
                            *tv = rv + wrap_diff_deg(*tv - rv);
                        }
                    }
                    Representation::Quaternion => {
                        let dot: f64 = tj.iter().zip(rj).map(|(a, b)| a * b).sum();
                        if dot < 0.0 {
                            tj.iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                    _ => {}
                }
                let mut l = 0.0;
                for k in 0..d {
                    let diff = rj[k] - tj[k];
                    l += diff * diff;
                    gj[k] = 2.0 * diff * inv_j;
                }
                per_joint.push(l);
            }
            Supervision::So3 => {
                let yhat = rep_to_matrix(rj, kind, spec.convention)?;
                let diff = yhat - t.rotations[j];
                per_joint.push(diff.norm_squared());
                let g = diff * (2.0 * inv_j);
                gj.copy_from_slice(&rep_backward(rj, kind, spec.convention, &g));
            }
        }
    }
    let total = per_joint.iter().sum::<f64>() * inv_j;
    Ok((LossValue { total, per_joint }, grad))
}

/// Direct loss on raw representation vectors or squared Frobenius loss on
/// the mapped rotations, averaged over joints.
pub fn loss(pred: &[f64], target: &Target, spec: &LossSpec) -> Result<LossValue> {
    Ok(loss_grad(pred, target, spec)?.0)
}

// ---------------------------------------------------------------------------
// forward / backward over a batch

/// Gradients of the mean batch loss.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    /// Same layout as [`Network::params`].
    pub params: Vec<f64>,
    /// `[sample][view][x][y][z][channel]`, when requested.
    pub inputs: Option<Vec<Vec<Vec<f64>>>>,
    /// Samples dropped because the prediction was degenerate.
    pub skipped: usize,
}

struct StepOut {
    loss: f64,
    grads: Vec<f64>,
    volume_grads: Option<Vec<Vec<f64>>>,
    skipped: usize,
}

impl Network {
    fn check_volume(&self, v: &AggregatedVolume) -> Result<()> {
        if v.side != self.arch.side || v.channels != self.arch.joints {
            return Err(Error::invalid(format!(
                "volume is {}³×{}, network expects {}³×{}",
                v.side, v.channels, self.arch.side, self.arch.joints
            )));
        }
        Ok(())
    }

    fn features(&self, prep: &PreparedEncoder, volumes: &[&[f64]]) -> (DMatrix<f64>, Vec<EncoderCache>) {
        let encoded: Vec<(Vec<f64>, EncoderCache)> =
            volumes.par_iter().map(|v| self.encode_cached(prep, v)).collect();
        let f = 8 * self.arch.joints;
        let mut x = DMatrix::zeros(volumes.len(), f);
        for (r, (feat, _)) in encoded.iter().enumerate() {
            for (k, v) in feat.iter().enumerate() {
                x[(r, k)] = *v;
            }
        }
        (x, encoded.into_iter().map(|(_, c)| c).collect())
    }

    /// Representation vectors for a batch of aggregated volumes.
    pub fn predict_batch(&self, volumes: &[&AggregatedVolume], mode: BnMode) -> Result<(DMatrix<f64>, Vec<f64>)> {
        for v in volumes {
            self.check_volume(v)?;
        }
        let prep = self.prepare_encoder();
        let vals: Vec<&[f64]> = volumes.iter().map(|v| v.values.as_slice()).collect();
        let (x, _) = self.features(&prep, &vals);
        let mut buffers = self.buffers.clone();
        let (out, _) = self.regress_batch(&mut buffers, x, mode);
        Ok((out, buffers))
    }

    fn step(
        &self,
        buffers: &mut [f64],
        volumes: &[&[f64]],
        targets: &[&Target],
        spec: &LossSpec,
        mode: BnMode,
        skip_encoder: bool,
        want_volume_grads: bool,
    ) -> Result<StepOut> {
        let prep = self.prepare_encoder();
        let (x, caches) = self.features(&prep, volumes);
        let (out, rcache) = self.regress_batch(buffers, x, mode);
        let n = volumes.len();
        let mut gout = DMatrix::zeros(n, out.ncols());
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        let mut per_sample = Vec::with_capacity(n);
        for (i, t) in targets.iter().enumerate() {
            let r: Vec<f64> = out.row(i).iter().copied().collect();
            match loss_grad(&r, t, spec) {
                Ok((lv, g)) => {
                    total += lv.total;
                    used += 1;
                    per_sample.push(Some(g));
                }
                Err(Error::DegenerateRepresentation(_)) => {
                    skipped += 1;
                    per_sample.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Ok(StepOut {
                loss: 0.0,
                grads: vec![0.0; self.params.len()],
                volume_grads: None,
                skipped,
            });
        }
        let scale = 1.0 / used as f64;
        for (i, g) in per_sample.iter().enumerate() {
            if let Some(g) = g {
                for (k, v) in g.iter().enumerate() {
                    gout[(i, k)] = v * scale;
                }
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let gfeat = self.regress_backward(&rcache, &gout, &mut grads);
        let mut volume_grads = None;
        if !skip_encoder || want_volume_grads {
            let enc_len = self.encoder_len();
            let per: Vec<(Vec<f64>, Option<Vec<f64>>)> = caches
                .par_iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut g = vec![0.0; enc_len];
                    let row: Vec<f64> = gfeat.row(i).iter().copied().collect();
                    let gin = self.encode_backward(&prep, c, &row, &mut g, want_volume_grads);
                    (g, gin)
                })
                .collect();
            let mut vg = Vec::new();
            for (g, gin) in per {
                if !skip_encoder {
                    for (a, b) in grads[..enc_len].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                if let Some(gin) = gin {
                    vg.push(gin);
                }
            }
            if want_volume_grads {
                volume_grads = Some(vg);
            }
        }
        Ok(StepOut {
            loss: total * scale,
            grads,
            volume_grads,
            skipped,
        })
    }
}

/// Mean loss over a batch of multi-view inputs, with the gradient of every
/// parameter and (optionally) of every view volume through the softmax
/// aggregation.
pub fn backward(
    net: &Network,
    views: &[Vec<ViewVolume>],
    targets: &[Target],
    spec: &LossSpec,
    mode: BnMode,
    want_input_grads: bool,
) -> Result<BatchGradients> {
    if views.len() != targets.len() || views.is_empty() {
        return Err(Error::invalid("need one target per sample and at least one sample"));
    }
    let fused: Vec<AggregatedVolume> = views.iter().map(|v| aggregate(v)).collect::<Result<_>>()?;
    for f in &fused {
        net.check_volume(f)?;
    }
    let vals: Vec<&[f64]> = fused.iter().map(|f| f.values.as_slice()).collect();
    let trefs: Vec<&Target> = targets.iter().collect();
    let mut buffers = net.buffers.clone();
    let out = net.step(&mut buffers, &vals, &trefs, spec, mode, false, want_input_grads)?;
    if let Some(i) = out.grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            layer: net.layer_of(i).to_string(),
        });
    }
    let inputs = out.volume_grads.map(|vg| {
        vg.iter()
            .zip(views.iter().zip(&fused))
            .map(|(g, (v, f))| aggregate_backward(v, f, g))
            .collect()
    });
    Ok(BatchGradients {
        loss: out.loss,
        params: out.grads,
        inputs,
        skipped: out.skipped,
    })
}

/// Mean batch loss only (no gradients, running statistics untouched).
pub fn batch_loss(net: &Network, views: &[Vec<ViewVolume>], targets: &[Target], spec: &LossSpec, mode: BnMode) -> Result<f64> {
    let fused: Vec<AggregatedVolume> = views.iter().map(|v| aggregate(v)).collect::<Result<_>>()?;
    let refs: Vec<&AggregatedVolume> = fused.iter().collect();
    let (out, _) = net.predict_batch(&refs, mode)?;
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let r: Vec<f64> = out.row(i).iter().copied().collect();
        total += loss(&r, t, spec)?.total;
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose gradient magnitude exceeds the absolute floor.
    pub nontrivial: usize,
    pub failures: usize,
    /// Largest `|a − n| / max(|a|, |n|)` among entries outside the absolute floor.
    pub max_rel_err: f64,
    /// Largest `|a − n| / max(rel_tol · max(|a|, |n|), abs_tol)`; at most 1 when passing.
    pub max_tol_ratio: f64,
    /// Description of the worst entry.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares analytic gradients with central differences for every
/// parameter and every view-volume entry. An entry passes when the absolute
/// error is below `abs_tol` or the relative error below `rel_tol`.
pub fn gradient_check(
    net: &Network,
    views: &[Vec<ViewVolume>],
    targets: &[Target],
    spec: &LossSpec,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport> {
    let mode = BnMode::Train;
    let analytic = backward(net, views, targets, spec, mode, true)?;
    let mut report = GradCheckReport {
        checked: 0,
        nontrivial: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_tol_ratio: 0.0,
        worst: String::new(),
    };
    let mut record = |what: String, a: f64, n: f64| {
        let abs = (a - n).abs();
        let rel = if abs == 0.0 { 0.0 } else { abs / a.abs().max(n.abs()) };
        let ok = abs <= abs_tol || rel < rel_tol;
        report.checked += 1;
        if a.abs().max(n.abs()) > abs_tol {
            report.nontrivial += 1;
        }
        report.max_tol_ratio = report.max_tol_ratio.max(abs / (rel_tol * a.abs().max(n.abs())).max(abs_tol));
        if !ok {
            report.failures += 1;
        }
        let score = if abs <= abs_tol { 0.0 } else { rel };
        if score >= report.max_rel_err {
            report.max_rel_err = score;
            report.worst = format!("{what}: analytic {a:e}, numeric {n:e}");
        }
    };
    let mut probe = net.clone();
    for i in 0..net.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let lp = batch_loss(&probe, views, targets, spec, mode)?;
        probe.params[i] = orig - h;
        let lm = batch_loss(&probe, views, targets, spec, mode)?;
        probe.params[i] = orig;
        record(format!("{}[{}]", net.layer_of(i), i), analytic.params[i], (lp - lm) / (2.0 * h));
    }
    let inputs = analytic.inputs.expect("requested input gradients");
    // Without batch normalization the samples do not interact, so an input
    // perturbation only needs the loss of its own sample.
    let separable = !net.arch.batch_norm;
    let n = views.len() as f64;
    let mut vs = views.to_vec();
    for s in 0..vs.len() {
        for v in 0..vs[s].len() {
            for k in 0..vs[s][v].values.len() {
                let orig = vs[s][v].values[k];
                let eval = |vs: &[Vec<ViewVolume>]| {
                    if separable {
                        Ok(batch_loss(net, &vs[s..s + 1], &targets[s..s + 1], spec, mode)? / n)
                    } else {
                        batch_loss(net, vs, targets, spec, mode)
                    }
                };
                vs[s][v].values[k] = orig + h;
                let lp = eval(&vs)?;
                vs[s][v].values[k] = orig - h;
                let lm = eval(&vs)?;
                vs[s][v].values[k] = orig;
                record(format!("input[{s}][{v}][{k}]"), inputs[s][v][k], (lp - lm) / (2.0 * h));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Updates `params[range]` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, range: std::ops::Range<usize>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in range {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub mpjae_train: f64,
    /// NaN without a validation split.
    pub mpjae_val: f64,
    pub lr: f64,
    pub skipped: usize,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,mpjae_train,mpjae_val,lr\n");
    for m in metrics {
        s.push_str(&format!("{},{},{},{},{}\n", m.epoch, m.loss, m.mpjae_train, m.mpjae_val, m.lr));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub epoch: usize,
    pub seed: u64,
    pub parameters: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "kinemetric-checkpoint-1";

impl Checkpoint {
    pub fn new(net: &Network, config: &TrainConfig, epoch: usize) -> Self {
        let tensors = |entries: &[ParamEntry], data: &[f64]| {
            entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: data[e.offset..e.offset + e.len()].to_vec(),
                })
                .collect()
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            architecture: net.arch.clone(),
            epoch,
            seed: config.seed,
            parameters: tensors(&net.entries, &net.params),
            buffers: tensors(&net.buffer_entries, &net.buffers),
        }
    }

    pub fn network(&self) -> Result<Network> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format `{}`", self.format)));
        }
        let mut net = Network::zeros(self.architecture.clone())?;
        let fill = |entries: &[ParamEntry], data: &mut [f64], tensors: &[NamedTensor]| -> Result<()> {
            if entries.len() != tensors.len() {
                return Err(Error::invalid("checkpoint tensor list does not match the architecture"));
            }
            for (e, t) in entries.iter().zip(tensors) {
                if e.name != t.name || e.shape != t.shape || t.values.len() != e.len() {
                    return Err(Error::invalid(format!("checkpoint tensor `{}` does not match `{}`", t.name, e.name)));
                }
                data[e.offset..e.offset + e.len()].copy_from_slice(&t.values);
            }
            Ok(())
        };
        let entries = net.entries.clone();
        fill(&entries, &mut net.params, &self.parameters)?;
        let bentries = net.buffer_entries.clone();
        fill(&bentries, &mut net.buffers, &self.buffers)?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), "checkpoint", e.to_string()))?;
        c.network().map_err(|e| Error::parse(path, 1, "parameters", e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// Aggregated input volumes of a dataset, cached when small enough.
struct VolumeSource<'a> {
    data: &'a Dataset,
    cameras: Vec<crate::geomcam::CameraProjection>,
    mode: RootMode,
    side: usize,
    side_mm: f64,
    cache: Option<Vec<AggregatedVolume>>,
}

const VOLUME_CACHE_LIMIT: usize = 1 << 23;

impl<'a> VolumeSource<'a> {
    fn new(data: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        let mut src = VolumeSource {
            data,
            cameras: data.heatmap_cameras()?,
            mode: config.root_mode,
            side: config.side,
            side_mm: config.side_mm,
            cache: None,
        };
        if data.len() * config.side.pow(3) * data.joint_count() <= VOLUME_CACHE_LIMIT {
            let idx: Vec<usize> = (0..data.len()).collect();
            src.cache = Some(src.build(&idx)?);
        }
        Ok(src)
    }

    fn build(&self, idx: &[usize]) -> Result<Vec<AggregatedVolume>> {
        idx.par_iter()
            .map(|&i| {
                aggregate(&self.data.view_volumes(&self.cameras, i, self.mode, self.side, self.side_mm)?)
            })
            .collect()
    }

    fn get(&self, idx: &[usize]) -> Result<Vec<std::borrow::Cow<'_, AggregatedVolume>>> {
        match &self.cache {
            Some(c) => Ok(idx.iter().map(|&i| std::borrow::Cow::Borrowed(&c[i])).collect()),
            None => Ok(self.build(idx)?.into_iter().map(std::borrow::Cow::Owned).collect()),
        }
    }
}

const EVAL_CHUNK: usize = 32;

fn predict_source(net: &Network, src: &VolumeSource) -> Result<AngleSet> {
    let conv = net.arch.convention();
    let n = src.data.len();
    let mut frames = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let vols = src.get(&idx)?;
        let refs: Vec<&AggregatedVolume> = vols.iter().map(|v| v.as_ref()).collect();
        let (out, _) = net.predict_batch(&refs, BnMode::Eval)?;
        for row in out.row_iter() {
            let r: Vec<f64> = row.iter().copied().collect();
            let rots = map_to_so3(&r, net.arch.representation, conv)
                .unwrap_or_else(|_| vec![RotationMatrix::identity(); net.arch.joints]);
            frames.push(rots.iter().map(|m| matrix_to_euler(m, conv)).collect());
        }
    }
    AngleSet::new(src.data.joints.clone(), src.data.samples.iter().map(|s| s.time).collect(), frames)
}

/// Predicted joint angles for every frame of `data` (eval-mode batch norm).
pub fn predict(net: &Network, data: &Dataset, config: &TrainConfig) -> Result<AngleSet> {
    check_dataset(net, data)?;
    predict_source(net, &VolumeSource::new(data, config)?)
}

pub fn evaluate(net: &Network, data: &Dataset, config: &TrainConfig) -> Result<f64> {
    mpjae(&predict(net, data, config)?, &data.angle_set()?)
}

fn check_dataset(net: &Network, data: &Dataset) -> Result<()> {
    if data.joint_count() != net.arch.joints {
        return Err(Error::invalid(format!(
            "dataset has {} joints, network {}",
            data.joint_count(),
            net.arch.joints
        )));
    }
    Ok(())
}

pub fn architecture_for(data: &Dataset, config: &TrainConfig) -> Architecture {
    Architecture {
        joints: data.joint_count(),
        side: config.side,
        hidden: config.hidden,
        representation: config.representation,
        batch_norm: config.batch_norm,
        euler_convention: data.convention.tag(),
    }
}

/// Trains with Adam on `train`, reporting MPJAE on `train` and `val` after
/// every epoch. `init` continues from existing weights (for fine-tuning).
pub fn train(train: &Dataset, val: &Dataset, config: &TrainConfig, init: Option<Network>) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let arch = architecture_for(train, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = match init {
        Some(n) => {
            if n.arch != arch {
                return Err(Error::invalid("initial network does not match the configured architecture"));
            }
            n
        }
        None => Network::init(arch, &mut rng)?,
    };
    check_dataset(&net, train)?;
    if !val.is_empty() {
        check_dataset(&net, val)?;
    }
    let spec = config.loss_spec(train.convention);
    let train_src = VolumeSource::new(train, config)?;
    let val_src = VolumeSource::new(val, config)?;
    let train_gt = train.angle_set()?;
    let val_gt = val.angle_set()?;
    let mut adam = Adam::new(net.params.len());
    let update = if config.freeze_encoder {
        net.encoder_len()..net.params.len()
    } else {
        0..net.params.len()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut last_good = Checkpoint::new(&net, config, 0);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for batch in order.chunks(config.batch_size) {
            let vols = train_src.get(batch)?;
            let vals: Vec<&[f64]> = vols.iter().map(|v| v.values.as_slice()).collect();
            let targets: Vec<&Target> = batch.iter().map(|&i| &train.samples[i].target).collect();
            let mut buffers = net.buffers.clone();
            let out = net.step(&mut buffers, &vals, &targets, &spec, BnMode::Train, config.freeze_encoder, false)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            if let Some(i) = out.grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    layer: net.layer_of(i).to_string(),
                });
            }
            net.buffers = buffers;
            adam.step(&mut net.params, &out.grads, lr, update.clone());
            loss_sum += out.loss;
            batches += 1;
            skipped += out.skipped;
        }
        let mpjae_train = mpjae(&predict_source(&net, &train_src)?, &train_gt)?;
        let mpjae_val = if val.is_empty() {
            f64::NAN
        } else {
            mpjae(&predict_source(&net, &val_src)?, &val_gt)?
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            mpjae_train,
            mpjae_val,
            lr,
            skipped,
        });
        last_good = Checkpoint::new(&net, config, epoch);
    }
    Ok(TrainOutcome {
        network: net,
        metrics,
        checkpoint: last_good,
    })
}

/// Splits `data` by the configured validation fraction and trains.
pub fn train_split(data: &Dataset, config: &TrainConfig, init: Option<Network>) -> Result<TrainOutcome> {
    let (tr, va) = data.split(config.val_fraction)?;
    train(&tr, &va, config, init)
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub representation: Representation,
    pub supervision: Supervision,
    pub root_mode: RootMode,
    pub side: usize,
    /// Final validation MPJAE (train MPJAE without a validation split).
    pub mpjae: f64,
}

pub const ABLATION_SIDES: [usize; 3] = [16, 32, 64];

/// Trains every combination of representation, supervision, root mode and
/// cube side with the same seed.
pub fn ablation_matrix(data: &Dataset, base: &TrainConfig, sides: &[usize]) -> Result<Vec<AblationCell>> {
    let (tr, va) = data.split(base.val_fraction)?;
    let mut cells = Vec::new();
    for rep in Representation::ALL {
        for mode in [RootMode::Global, RootMode::Local] {
            for &side in sides {
                for sup in Supervision::ALL {
                    let cfg = TrainConfig {
                        representation: rep,
                        supervision: sup,
                        root_mode: mode,
                        side,
                        ..base.clone()
                    };
                    let out = train(&tr, &va, &cfg, None)?;
                    let last = out.metrics.last().expect("at least one epoch");
                    cells.push(AblationCell {
                        representation: rep,
                        supervision: sup,
                        root_mode: mode,
                        side,
                        mpjae: if va.is_empty() { last.mpjae_train } else { last.mpjae_val },
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// One row per representation, root mode and side; direct and SO(3) columns.
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("representation,root_translation,resolution,direct,so3\n");
    for c in cells.iter().filter(|c| c.supervision == Supervision::Direct) {
        let so3 = cells
            .iter()
            .find(|o| {
                o.supervision == Supervision::So3
                    && o.representation == c.representation
                    && o.root_mode == c.root_mode
                    && o.side == c.side
            })
            .map_or(f64::NAN, |o| o.mpjae);
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.representation,
            c.root_mode.name(),
            c.side,
            c.mpjae,
            so3
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// continuity

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityWitness {
    /// First Euler angle of the target along the path, as stored (wrapped).
    pub path_deg: Vec<f64>,
    pub direct_raw: Vec<f64>,
    pub direct_nearest: Vec<f64>,
    pub so3: Vec<f64>,
}

fn max_jump(v: &[f64]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

impl ContinuityWitness {
    pub fn max_jump_direct_raw(&self) -> f64 {
        max_jump(&self.direct_raw)
    }

    pub fn max_jump_direct_nearest(&self) -> f64 {
        max_jump(&self.direct_nearest)
    }

    pub fn max_jump_so3(&self) -> f64 {
        max_jump(&self.so3)
    }
}

/// Losses of a fixed Euler prediction against a single-joint target whose
/// first angle sweeps `start..=end` degrees in `steps` steps. Targets are
/// stored wrapped to `[-180, 180)`, as a data generator would write them.
pub fn continuity_witness(pred: [f64; 3], rest: [f64; 2], start: f64, end: f64, steps: usize) -> Result<ContinuityWitness> {
    if steps < 1 {
        return Err(Error::invalid("need at least one step"));
    }
    let conv = EulerConvention::XYZ;
    let mut w = ContinuityWitness {
        path_deg: Vec::new(),
        direct_raw: Vec::new(),
        direct_nearest: Vec::new(),
        so3: Vec::new(),
    };
    let spec = |sup, pol| LossSpec {
        representation: Representation::Euler,
        supervision: sup,
        euler_targets: pol,
        convention: conv,
    };
    for k in 0..=steps {
        let a = start + (end - start) * k as f64 / steps as f64;
        let e = EulerTriple::new(a, rest[0], rest[1]);
        let t = Target::from_euler(&[e], conv);
        w.path_deg.push(e.x);
        w.direct_raw.push(loss(&pred, &t, &spec(Supervision::Direct, EulerTargetPolicy::Raw))?.total);
        w.direct_nearest
            .push(loss(&pred, &t, &spec(Supervision::Direct, EulerTargetPolicy::NearestBranch))?.total);
        w.so3.push(loss(&pred, &t, &spec(Supervision::So3, EulerTargetPolicy::Raw))?.total);
    }
    Ok(w)
}
