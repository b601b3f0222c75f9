//! MiniConvNet: a small residual CNN family used for both teacher and
//! student, with feature taps at every downsampling stage and the 1×1
//! channel adapters that map student taps up to teacher width.
//!
//! Layout: a 3×3 stride-1 stem conv (no pooling), then the stages. A stage
//! whose `downsample` flag is set enters with a stride-2 block. With
//! `residual` on, a block is `relu(conv3x3(relu(conv3x3(x))) + shortcut(x))`
//! where the shortcut is a 1×1 projection whenever stride or width change;
//! otherwise a block is a single `relu(conv3x3(x))`. The head is global
//! average pooling followed by a dense classifier. There is no batch
//! normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kv::{self, Section};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Stage entry uses a stride-2 block.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub residual: bool,
}

impl NetworkSpec {
    /// Default family: one entry per stage width, every stage after the
    /// first downsamples, residual blocks on.
    pub fn family(channels: &[usize], blocks: usize, num_classes: usize, input_channels: usize) -> Self {
        Self {
            stages: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| StageSpec {
                    blocks,
                    channels: c,
                    downsample: i > 0,
                })
                .collect(),
            num_classes,
            input_channels,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 stages, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 {
                return Err(Error::InvalidSpec(format!("stage {i}: blocks must be positive")));
            }
            if s.channels == 0 {
                return Err(Error::InvalidSpec(format!("stage {i}: channels must be positive")));
            }
        }
        if self.tap_count() == 0 {
            return Err(Error::InvalidSpec("no stage downsamples, so there is no tap point".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidSpec("input_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }

    /// Channel width at each tap, shallow to deep.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.stages.iter().filter(|s| s.downsample).map(|s| s.channels).collect()
    }

    /// Spatial size at each tap for an `h × w` input.
    pub fn tap_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.downsample {
                if h < 2 || w < 2 {
                    return Err(Error::ResolutionUnderflow(format!(
                        "stage {i} downsamples a {h}x{w} map; input too small for {} downsampling stages",
                        self.tap_count()
                    )));
                }
                h = (h - 1) / 2 + 1;
                w = (w - 1) / 2 + 1;
                out.push((h, w));
            }
        }
        Ok(out)
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut v = Vec::new();
        let mut c_in = self.stages[0].channels;
        v.push(LayerShape::conv("stem", self.stages[0].channels, self.input_channels, 3));
        for (si, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 && stage.downsample { 2 } else { 1 };
                let c = stage.channels;
                let p = format!("s{si}.b{b}");
                if self.residual {
                    v.push(LayerShape::conv(&format!("{p}.conv_a"), c, c_in, 3));
                    v.push(LayerShape::conv(&format!("{p}.conv_b"), c, c, 3));
                    if stride != 1 || c != c_in {
                        v.push(LayerShape::conv(&format!("{p}.shortcut"), c, c_in, 1));
                    }
                } else {
                    v.push(LayerShape::conv(&format!("{p}.conv"), c, c_in, 3));
                }
                c_in = c;
            }
        }
        v.push(LayerShape {
            name: "fc.weight".into(),
            shape: vec![c_in, self.num_classes],
            fan_in: c_in,
            kind: LayerKind::Dense,
        });
        v.push(LayerShape {
            name: "fc.bias".into(),
            shape: vec![self.num_classes],
            fan_in: c_in,
            kind: LayerKind::Bias,
        });
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.shape.iter().product::<usize>()).sum()
    }

    pub fn write_kv(&self, s: &mut Section) {
        let ch: Vec<usize> = self.stages.iter().map(|s| s.channels).collect();
        let bl: Vec<usize> = self.stages.iter().map(|s| s.blocks).collect();
        let ds: Vec<bool> = self.stages.iter().map(|s| s.downsample).collect();
        s.set("channels", kv::list(&ch))
            .set("blocks", kv::list(&bl))
            .set("downsample", kv::list(&ds))
            .set("residual", self.residual)
            .set("num_classes", self.num_classes)
            .set("input_channels", self.input_channels);
    }

    /// Reads a spec written by [`NetworkSpec::write_kv`]. `blocks` may be a
    /// single integer; `downsample` defaults to the family rule.
    pub fn from_kv(s: &Section) -> Result<Self> {
        let channels: Vec<usize> = s
            .get_list("channels", "integers")?
            .ok_or_else(|| Error::Config(format!("[{}] missing `channels`", s.name)))?;
        let blocks: Vec<usize> = match s.get_list("blocks", "integers") {
            Ok(Some(b)) => b,
            Ok(None) => vec![1; channels.len()],
            Err(_) => vec![s.get_usize("blocks")?.unwrap_or(1); channels.len()],
        };
        let downsample: Vec<bool> = s
            .get_list("downsample", "booleans")?
            .unwrap_or_else(|| (0..channels.len()).map(|i| i > 0).collect());
        if blocks.len() != channels.len() || downsample.len() != channels.len() {
            return Err(Error::Config(format!(
                "[{}] channels, blocks and downsample must have equal lengths",
                s.name
            )));
        }
        let spec = NetworkSpec {
            stages: channels
                .into_iter()
                .zip(blocks)
                .zip(downsample)
                .map(|((channels, blocks), downsample)| StageSpec {
                    blocks,
                    channels,
                    downsample,
                })
                .collect(),
            num_classes: s.get_usize("num_classes")?.unwrap_or(0),
            input_channels: s.get_usize("input_channels")?.unwrap_or(0),
            residual: s.get_bool("residual")?.unwrap_or(true),
        };
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    Dense,
    Bias,
}

#[derive(Clone, Debug)]
struct LayerShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    kind: LayerKind,
}

impl LayerShape {
    fn conv(name: &str, c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![c_out, c_in, k, k],
            fan_in: c_in * k * k,
            kind: LayerKind::Conv,
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = match self.kind {
            LayerKind::Conv => (6.0 / self.fan_in as f64).sqrt(),
            LayerKind::Dense => (1.0 / self.fan_in as f64).sqrt(),
            LayerKind::Bias => 0.0,
        } as f32;
        if bound == 0.0 {
            return Tensor::zeros(self.shape.clone());
        }
        Tensor::from_fn(self.shape.clone(), |_| rng.random_range(-bound..bound))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
struct Block {
    stride: usize,
    convs: Vec<usize>,
    shortcut: Option<usize>,
}

#[derive(Clone, Debug)]
struct StageLayout {
    blocks: Vec<Block>,
    tap: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: usize,
    stages: Vec<StageLayout>,
    fc_w: usize,
    fc_b: usize,
}

impl Layout {
    fn from_names(spec: &NetworkSpec, names: &[String]) -> Self {
        let find = |n: &str| names.iter().position(|x| x == n);
        let stages = spec
            .stages
            .iter()
            .enumerate()
            .map(|(si, st)| StageLayout {
                tap: st.downsample,
                blocks: (0..st.blocks)
                    .map(|b| {
                        let p = format!("s{si}.b{b}");
                        let convs = if spec.residual {
                            vec![find(&format!("{p}.conv_a")).unwrap(), find(&format!("{p}.conv_b")).unwrap()]
                        } else {
                            vec![find(&format!("{p}.conv")).unwrap()]
                        };
                        Block {
                            stride: if b == 0 && st.downsample { 2 } else { 1 },
                            convs,
                            shortcut: find(&format!("{p}.shortcut")),
                        }
                    })
                    .collect(),
            })
            .collect();
        Layout {
            stem: find("stem").unwrap(),
            stages,
            fc_w: find("fc.weight").unwrap(),
            fc_b: find("fc.bias").unwrap(),
        }
    }
}

/// Feature map observed at the output of a downsampling stage.
#[derive(Clone, Copy, Debug)]
pub struct TapPoint<'t> {
    pub stage_index: usize,
    pub feature: Var<'t>,
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub taps: Vec<TapPoint<'t>>,
    /// Leaf of every parameter, in [`Network::params`] order.
    pub params: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    layout: Layout,
}

impl Network {
    /// Deterministic fan-in-scaled uniform initialization; classifier bias
    /// starts at zero.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let params: Vec<Param> = spec
            .layers()
            .iter()
            .map(|l| Param {
                name: l.name.clone(),
                tensor: l.init(&mut rng).with_requires_grad(),
            })
            .collect();
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        Ok(Self {
            layout: Layout::from_names(spec, &names),
            spec: spec.clone(),
            params,
        })
    }

    /// Rebuilds a network from named tensors, checking every name and shape.
    pub fn from_params(spec: &NetworkSpec, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        if named.len() != layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                layers.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(layers.len());
        for l in &layers {
            let i = named
                .iter()
                .position(|(n, _)| *n == l.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", l.name)))?;
            let (name, mut tensor) = named.swap_remove(i);
            if tensor.shape() != l.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, spec needs {:?}",
                    tensor.shape(),
                    l.shape
                )));
            }
            tensor.set_requires_grad(true);
            params.push(Param { name, tensor });
        }
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        Ok(Self {
            layout: Layout::from_names(spec, &names),
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Stops gradient tracking on every parameter. Forward is unaffected.
    pub fn freeze(mut self) -> Self {
        for p in &mut self.params {
            p.tensor.set_requires_grad(false);
        }
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.tensor.requires_grad())
    }

    /// CRC-32 over every parameter's name, shape and values.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update(&p.tensor.checksum().to_le_bytes());
        }
        h.finalize()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Records a forward pass of `x` (`[n,c,h,w]`) on `tape`, collecting the
    /// post-activation output of every downsampling stage.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Forward<'t>> {
        self.run(tape, x, true)
    }

    fn run<'t>(&self, tape: &'t Tape, x: Var<'t>, collect_taps: bool) -> Result<Forward<'t>> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::shape("forward", format!("expected [n,c,h,w], got {shape:?}")));
        }
        if shape[1] != self.spec.input_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {} channels, network expects {}", shape[1], self.spec.input_channels),
            ));
        }
        self.spec.tap_sizes(shape[2], shape[3])?;
        let p: Vec<Var<'t>> = self.params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        let mut h = x.conv2d(p[self.layout.stem], 1, 1)?.relu();
        let mut taps = Vec::new();
        for (si, stage) in self.layout.stages.iter().enumerate() {
            for block in &stage.blocks {
                h = if self.spec.residual {
                    let a = h.conv2d(p[block.convs[0]], block.stride, 1)?.relu();
                    let b = a.conv2d(p[block.convs[1]], 1, 1)?;
                    let skip = match block.shortcut {
                        Some(s) => h.conv2d(p[s], block.stride, 0)?,
                        None => h,
                    };
                    b.add(skip)?.relu()
                } else {
                    h.conv2d(p[block.convs[0]], block.stride, 1)?.relu()
                };
            }
            if stage.tap && collect_taps {
                taps.push(TapPoint {
                    stage_index: si,
                    feature: h,
                });
            }
        }
        let logits = h.global_avg_pool()?.matmul(p[self.layout.fc_w])?.add_bias(p[self.layout.fc_b])?;
        Ok(Forward { logits, taps, params: p })
    }

    /// Logits and tap values for `batch` on a private tape.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        let tape = Tape::new();
        let out = self.run(&tape, tape.constant(batch.detached()), true)?;
        let taps = out
            .taps
            .iter()
            .map(|t| (t.stage_index, t.feature.value().as_ref().clone()))
            .collect();
        Ok((out.logits.value().as_ref().clone(), taps))
    }

    /// Logits only; no tap bookkeeping.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.run(&tape, tape.constant(batch.detached()), false)?;
        Ok(out.logits.value().as_ref().clone())
    }

    /// Moves gradients recorded on `tape` into the parameter buffers.
    pub fn collect_grads(&mut self, tape: &Tape, leaves: &[Var<'_>]) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(leaves) {
            tape.accumulate_into(*v, &mut p.tensor)?;
        }
        Ok(())
    }
}

/// 1×1 convolution lifting a student tap to the teacher's channel width.
/// Equal widths give the identity and no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAdapter {
    kernel: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
}

impl ChannelAdapter {
    pub fn new(student_channels: usize, teacher_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        if student_channels == teacher_channels {
            return Self::identity(student_channels);
        }
        let bound = (3.0 / student_channels as f64).sqrt() as f32;
        let kernel = Tensor::from_fn([teacher_channels, student_channels, 1, 1], |_| rng.random_range(-bound..bound));
        Self {
            kernel: Some(kernel.with_requires_grad()),
            in_channels: student_channels,
            out_channels: teacher_channels,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            kernel: None,
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn from_kernel(kernel: Tensor) -> Result<Self> {
        let s = kernel.shape().to_vec();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(Error::shape("adapter", format!("kernel must be [c_t,c_s,1,1], got {s:?}")));
        }
        Ok(Self {
            kernel: Some(kernel.with_requires_grad()),
            in_channels: s[1],
            out_channels: s[0],
        })
    }

    /// One adapter per tap index, pairing shallow to deep.
    pub fn for_pair(student: &NetworkSpec, teacher: &NetworkSpec, seed: u64) -> Result<Vec<Self>> {
        let (s, t) = (student.tap_channels(), teacher.tap_channels());
        if s.len() != t.len() {
            return Err(Error::InvalidSpec(format!(
                "teacher has {} tap points, student has {}; tap counts must match",
                t.len(),
                s.len()
            )));
        }
        let mut rng = seed::rng(seed);
        Ok(s.iter().zip(&t).map(|(&cs, &ct)| Self::new(cs, ct, &mut rng)).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.kernel.is_none()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> Option<&Tensor> {
        self.kernel.as_ref()
    }

    pub fn kernel_mut(&mut self) -> Option<&mut Tensor> {
        self.kernel.as_mut()
    }

    /// Records the kernel on `tape` (None for the identity).
    pub fn register<'t>(&self, tape: &'t Tape) -> Option<Var<'t>> {
        self.kernel.as_ref().map(|k| tape.leaf(k))
    }

    /// Maps `student_tap` to teacher width, checking it against the paired
    /// teacher tap's shape.
    pub fn adapt<'t>(&self, kernel: Option<Var<'t>>, student_tap: Var<'t>, teacher_shape: &[usize]) -> Result<Var<'t>> {
        let s = student_tap.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "adapt_channels",
                format!("student tap {s:?} does not have {} channels", self.in_channels),
            ));
        }
        if teacher_shape.len() != 4 || s[2] != teacher_shape[2] || s[3] != teacher_shape[3] {
            return Err(Error::shape(
                "adapt_channels",
                format!("spatial mismatch between student tap {s:?} and teacher tap {teacher_shape:?}"),
            ));
        }
        match kernel {
            None => Ok(student_tap),
            Some(k) => student_tap.conv2d(k, 1, 0),
        }
    }
}

/// Value-level adapter application.
pub fn adapt_channels(adapter: &ChannelAdapter, student_tap: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(student_tap.detached());
    let k = adapter.kernel().map(|k| tape.constant(k.detached()));
    let mut target = student_tap.shape().to_vec();
    if target.len() == 4 {
        target[1] = adapter.out_channels;
    }
    Ok(adapter.adapt(k, x, &target)?.value().as_ref().clone())
}
