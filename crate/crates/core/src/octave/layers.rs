//! Generalized octave convolution (GoConv), its transposed counterpart
//! (GoTConv) and the octave residual blocks (GoRes / GoTRes).
//!
//! A GoConv layer has four vanilla paths. The intra-resolution paths
//! `H→H` and `L→L` run at the layer stride and are each followed by the
//! branch normalization; the inter-resolution paths exchange information on
//! the normalized intra outputs:
//!
//! ```text
//! O_H = N_H(f(I_H)) + g↑2(N_L(f(I_L)))
//! O_L = N_L(f(I_L)) + f↓2(N_H(f(I_H)))
//! ```
//!
//! GoTConv is identical with transposed convolutions on the intra paths.

use rand::Rng;

use super::gdn::{gdn, igdn, GdnParams};
use super::{ChannelSplit, OctavePair};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{ConvSpec, ParamId, ParamStore, ParamVars, Real, Tape, Tensor, Var};

/// Normalization applied after each intra-resolution path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// GDN in convolution layers, IGDN in transposed layers.
    Divisive,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchNorm {
    Gdn(GdnParams),
    Igdn(GdnParams),
    Relu,
    Identity,
}

impl BranchNorm {
    fn init<T: Real, R: Rng + ?Sized>(
        kind: NormKind,
        transposed: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        match (kind, transposed) {
            (NormKind::Divisive, false) => Self::Gdn(GdnParams::init(store, rng, name, channels)),
            (NormKind::Divisive, true) => Self::Igdn(GdnParams::init(store, rng, name, channels)),
            (NormKind::Relu, _) => Self::Relu,
            (NormKind::Identity, _) => Self::Identity,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        match self {
            Self::Gdn(p) => gdn(tape, pv, x, p),
            Self::Igdn(p) => igdn(tape, pv, x, p),
            Self::Relu => Ok(tape.relu(x)),
            Self::Identity => Ok(x),
        }
    }

    pub fn params(&self) -> Option<&GdnParams> {
        match self {
            Self::Gdn(p) | Self::Igdn(p) => Some(p),
            _ => None,
        }
    }
}

/// One vanilla convolution or transposed convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub transposed: bool,
    pub spec: ConvSpec,
}

impl ConvUnit {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, bias zero.
    /// Layers rescale the weights of paths whose outputs are summed.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        transposed: bool,
        spec: ConvSpec,
    ) -> Self {
        let area = kernel * kernel;
        let bound = (6.0 / ((in_ch + out_ch) * area) as f64).sqrt();
        let shape = if transposed {
            [in_ch, out_ch, kernel, kernel]
        } else {
            [out_ch, in_ch, kernel, kernel]
        };
        let w = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            transposed,
            spec,
        }
    }

    fn scale_weight<T: Real>(&self, store: &mut ParamStore<T>, factor: f64) {
        let f = T::lit(factor);
        let p = store.get_mut(self.weight);
        p.value = p.value.map(|v| v * f);
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let (w, b) = (pv.get(self.weight), Some(pv.get(self.bias)));
        if self.transposed {
            tape.tconv2d(x, w, b, self.spec)
        } else {
            tape.conv2d(x, w, b, self.spec)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Plain tensor in, octave pair out.
    First,
    Standard,
    /// Octave pair in, plain tensor out.
    Last,
}

/// Parameters and geometry of one GoConv / GoTConv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GoConvParams {
    pub kind: LayerKind,
    pub transposed: bool,
    pub kernel: usize,
    pub stride: usize,
    /// The caller reflection-pads the input by `kernel / 2`.
    pub prepadded: bool,
    /// For [`LayerKind::First`] the plain input channels are in `in_split.high`.
    pub in_split: ChannelSplit,
    /// For [`LayerKind::Last`] the plain output channels are in `out_split.high`.
    pub out_split: ChannelSplit,
    pub hh: ConvUnit,
    pub ll: Option<ConvUnit>,
    pub hl: Option<ConvUnit>,
    pub lh: Option<ConvUnit>,
    pub norm_h: BranchNorm,
    pub norm_l: BranchNorm,
}

/// Init gain for paths whose outputs are summed pairwise.
const SUMMED_PATH_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn intra_spec(kernel: usize, stride: usize, prepadded: bool, transposed: bool) -> ConvSpec {
    let half = kernel / 2;
    match (transposed, prepadded) {
        (false, false) => ConvSpec::new(stride, half),
        (false, true) => ConvSpec::new(stride, 0),
        (true, false) => ConvSpec::new(stride, half).with_out_pad(stride - 1),
        (true, true) => ConvSpec::new(stride, 2 * half).with_out_pad(stride - 1),
    }
}

fn down_spec(kernel: usize) -> ConvSpec {
    ConvSpec::new(2, kernel / 2)
}

fn up_spec(kernel: usize) -> ConvSpec {
    ConvSpec::new(2, kernel / 2).with_out_pad(1)
}

fn check_geometry(kernel: usize, stride: usize, prepadded: bool) -> Result<()> {
    if kernel.is_multiple_of(2) || kernel == 0 {
        return config_err(format!("octave layers need an odd kernel, got {kernel}"));
    }
    if !(1..=2).contains(&stride) {
        return config_err(format!("octave layer stride must be 1 or 2, got {stride}"));
    }
    if prepadded && stride != 1 {
        return config_err("reflection-padded octave layers must have stride 1");
    }
    Ok(())
}

impl GoConvParams {
    /// GoConv (`transposed = false`) or GoTConv (`transposed = true`) with
    /// octave pairs on both sides.
    #[allow(clippy::too_many_arguments)]
    pub fn standard<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_split: ChannelSplit,
        out_split: ChannelSplit,
        kernel: usize,
        stride: usize,
        prepadded: bool,
        transposed: bool,
        norm: NormKind,
    ) -> Result<Self> {
        check_geometry(kernel, stride, prepadded)?;
        let intra = intra_spec(kernel, stride, prepadded, transposed);
        let (ih, il, oh, ol) = (in_split.high, in_split.low, out_split.high, out_split.low);
        let hh = ConvUnit::init(
            store,
            rng,
            &format!("{name}.hh"),
            ih,
            oh,
            kernel,
            transposed,
            intra,
        );
        let ll = ConvUnit::init(
            store,
            rng,
            &format!("{name}.ll"),
            il,
            ol,
            kernel,
            transposed,
            intra,
        );
        let hl = ConvUnit::init(
            store,
            rng,
            &format!("{name}.hl"),
            oh,
            ol,
            kernel,
            false,
            down_spec(kernel),
        );
        let lh = ConvUnit::init(
            store,
            rng,
            &format!("{name}.lh"),
            ol,
            oh,
            kernel,
            true,
            up_spec(kernel),
        );
        for unit in [&hh, &ll, &hl, &lh] {
            unit.scale_weight(store, SUMMED_PATH_GAIN);
        }
        let norm_h = BranchNorm::init(norm, transposed, store, rng, &format!("{name}.norm_h"), oh);
        let norm_l = BranchNorm::init(norm, transposed, store, rng, &format!("{name}.norm_l"), ol);
        Ok(Self {
            kind: LayerKind::Standard,
            transposed,
            kernel,
            stride,
            prepadded,
            in_split,
            out_split,
            hh,
            ll: Some(ll),
            hl: Some(hl),
            lh: Some(lh),
            norm_h,
            norm_l,
        })
    }

    /// First encoder layer: plain image in, octave pair out.
    #[allow(clippy::too_many_arguments)]
    pub fn first<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_split: ChannelSplit,
        kernel: usize,
        prepadded: bool,
        norm: NormKind,
    ) -> Result<Self> {
        check_geometry(kernel, 1, prepadded)?;
        let intra = intra_spec(kernel, 1, prepadded, false);
        let (oh, ol) = (out_split.high, out_split.low);
        let hh = ConvUnit::init(
            store,
            rng,
            &format!("{name}.hh"),
            in_channels,
            oh,
            kernel,
            false,
            intra,
        );
        let hl = ConvUnit::init(
            store,
            rng,
            &format!("{name}.hl"),
            oh,
            ol,
            kernel,
            false,
            down_spec(kernel),
        );
        let norm_h = BranchNorm::init(norm, false, store, rng, &format!("{name}.norm_h"), oh);
        Ok(Self {
            kind: LayerKind::First,
            transposed: false,
            kernel,
            stride: 1,
            prepadded,
            in_split: ChannelSplit {
                high: in_channels,
                low: 0,
            },
            out_split,
            hh,
            ll: None,
            hl: Some(hl),
            lh: None,
            norm_h,
            norm_l: BranchNorm::Identity,
        })
    }

    /// Last decoder layer: octave pair in, plain image out.
    #[allow(clippy::too_many_arguments)]
    pub fn last<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_split: ChannelSplit,
        out_channels: usize,
        kernel: usize,
        prepadded: bool,
        norm: NormKind,
    ) -> Result<Self> {
        check_geometry(kernel, 1, prepadded)?;
        let intra = intra_spec(kernel, 1, prepadded, true);
        let oc = out_channels;
        let hh = ConvUnit::init(
            store,
            rng,
            &format!("{name}.hh"),
            in_split.high,
            oc,
            kernel,
            true,
            intra,
        );
        let ll = ConvUnit::init(
            store,
            rng,
            &format!("{name}.ll"),
            in_split.low,
            oc,
            kernel,
            true,
            intra,
        );
        let lh = ConvUnit::init(
            store,
            rng,
            &format!("{name}.lh"),
            oc,
            oc,
            kernel,
            true,
            up_spec(kernel),
        );
        for unit in [&hh, &lh] {
            unit.scale_weight(store, SUMMED_PATH_GAIN);
        }
        let norm_h = BranchNorm::init(norm, true, store, rng, &format!("{name}.norm_h"), oc);
        let norm_l = BranchNorm::init(norm, true, store, rng, &format!("{name}.norm_l"), oc);
        Ok(Self {
            kind: LayerKind::Last,
            transposed: true,
            kernel,
            stride: 1,
            prepadded,
            in_split,
            out_split: ChannelSplit { high: oc, low: 0 },
            hh,
            ll: Some(ll),
            hl: None,
            lh: Some(lh),
            norm_h,
            norm_l,
        })
    }

    /// Every parameter handle owned by this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for unit in [Some(self.hh), self.ll, self.hl, self.lh]
            .into_iter()
            .flatten()
        {
            ids.push(unit.weight);
            ids.push(unit.bias);
        }
        for n in [self.norm_h, self.norm_l] {
            if let Some(p) = n.params() {
                ids.push(p.beta);
                ids.push(p.gamma);
            }
        }
        ids
    }

    fn expect(&self, kind: LayerKind, transposed: bool) -> Result<()> {
        if self.kind != kind || self.transposed != transposed {
            return config_err(format!(
                "layer is {:?} (transposed: {}), used as {kind:?} (transposed: {transposed})",
                self.kind, self.transposed
            ));
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape<impl Real>, input: &OctavePair<Var>) -> Result<()> {
        let pad = if self.prepadded {
            2 * (self.kernel / 2)
        } else {
            0
        };
        let (_, ch, cl, _, _) = input.dims_padded(tape, pad)?;
        if ch != self.in_split.high || cl != self.in_split.low {
            return shape_err(format!(
                "layer expects {}+{} input channels, got {ch}+{cl}",
                self.in_split.high, self.in_split.low
            ));
        }
        Ok(())
    }

    /// Intra paths followed by the branch normalizations.
    fn intra<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        input: &OctavePair<Var>,
    ) -> Result<OctavePair<Var>> {
        let ll = self.ll.expect("standard and last layers own an L→L path");
        let h = self.hh.apply(tape, pv, input.high)?;
        let h = self.norm_h.apply(tape, pv, h)?;
        let l = ll.apply(tape, pv, input.low)?;
        let l = self.norm_l.apply(tape, pv, l)?;
        Ok(OctavePair::new(h, l))
    }

    fn exchange<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        intra: OctavePair<Var>,
    ) -> Result<OctavePair<Var>> {
        let up = self
            .lh
            .expect("standard layers own an L→H path")
            .apply(tape, pv, intra.low)?;
        let down = self
            .hl
            .expect("standard layers own an H→L path")
            .apply(tape, pv, intra.high)?;
        let high = tape.add(intra.high, up)?;
        let low = tape.add(intra.low, down)?;
        Ok(OctavePair::new(high, low))
    }
}

/// GoConv: octave pair in and out; output extent is the input's divided by
/// the layer stride.
pub fn goconv<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: &OctavePair<Var>,
    p: &GoConvParams,
) -> Result<OctavePair<Var>> {
    p.expect(LayerKind::Standard, false)?;
    p.check_input(tape, input)?;
    let intra = p.intra(tape, pv, input)?;
    p.exchange(tape, pv, intra)
}

/// GoTConv: octave pair in and out; output extent is the input's multiplied
/// by the layer stride.
pub fn gotconv<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: &OctavePair<Var>,
    p: &GoConvParams,
) -> Result<OctavePair<Var>> {
    p.expect(LayerKind::Standard, true)?;
    p.check_input(tape, input)?;
    let intra = p.intra(tape, pv, input)?;
    p.exchange(tape, pv, intra)
}

/// First-layer GoConv: `O_H = N_H(f(x))`, `O_L = f↓2(O_H)`.
pub fn goconv_first<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    x: Var,
    p: &GoConvParams,
) -> Result<OctavePair<Var>> {
    p.expect(LayerKind::First, false)?;
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != p.in_split.high {
        return shape_err(format!(
            "first layer expects {} channels, got {c}",
            p.in_split.high
        ));
    }
    let pad = if p.prepadded { 2 * (p.kernel / 2) } else { 0 };
    if (h - pad) % 2 != 0 || (w - pad) % 2 != 0 {
        return shape_err(format!(
            "first octave layer needs even extents, got {h}x{w}"
        ));
    }
    let high = p.hh.apply(tape, pv, x)?;
    let high = p.norm_h.apply(tape, pv, high)?;
    let low =
        p.hl.expect("first layer owns an H→L path")
            .apply(tape, pv, high)?;
    Ok(OctavePair::new(high, low))
}

/// Last-layer GoTConv: `O = N_H(g(I_H)) + g↑2(N_L(g(I_L)))`.
pub fn gotconv_last<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: &OctavePair<Var>,
    p: &GoConvParams,
) -> Result<Var> {
    p.expect(LayerKind::Last, true)?;
    p.check_input(tape, input)?;
    let intra = p.intra(tape, pv, input)?;
    let up =
        p.lh.expect("last layer owns an L→H path")
            .apply(tape, pv, intra.low)?;
    tape.add(intra.high, up)
}

/// Two stride-1 octave layers with separate skip connections per branch.
/// The second layer starts with zero weights, so a fresh block is the
/// identity on both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ResParams {
    pub first: GoConvParams,
    pub second: GoConvParams,
}

impl ResParams {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        split: ChannelSplit,
        kernel: usize,
        transposed: bool,
        norm: NormKind,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, rng: &mut R, tag: &str| {
            GoConvParams::standard(
                store,
                rng,
                &format!("{name}.{tag}"),
                split,
                split,
                kernel,
                1,
                false,
                transposed,
                norm,
            )
        };
        let first = mk(store, rng, "a")?;
        let second = mk(store, rng, "b")?;
        for unit in [Some(second.hh), second.ll, second.hl, second.lh].into_iter().flatten() {
            unit.scale_weight(store, 0.0);
        }
        Ok(Self { first, second })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.first.param_ids();
        ids.extend(self.second.param_ids());
        ids
    }

    fn check(&self, transposed: bool) -> Result<()> {
        for layer in [&self.first, &self.second] {
            if layer.stride != 1
                || layer.in_split != layer.out_split
                || layer.transposed != transposed
            {
                return config_err("residual blocks need width-preserving stride-1 layers");
            }
        }
        if self.first.out_split != self.second.in_split {
            return config_err("residual block layers disagree on their width");
        }
        Ok(())
    }
}

fn residual<T: Real>(
    tape: &mut Tape<T>,
    input: &OctavePair<Var>,
    branch: OctavePair<Var>,
) -> Result<OctavePair<Var>> {
    let high = tape.add(input.high, branch.high)?;
    let low = tape.add(input.low, branch.low)?;
    Ok(OctavePair::new(high, low))
}

/// GoRes: `in + GoConv₂(GoConv₁(in))` on each branch.
pub fn gores<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: &OctavePair<Var>,
    p: &ResParams,
) -> Result<OctavePair<Var>> {
    p.check(false)?;
    let a = goconv(tape, pv, input, &p.first)?;
    let b = goconv(tape, pv, &a, &p.second)?;
    residual(tape, input, b)
}

/// GoTRes: `in + GoTConv₂(GoTConv₁(in))` on each branch.
pub fn gotres<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: &OctavePair<Var>,
    p: &ResParams,
) -> Result<OctavePair<Var>> {
    p.check(true)?;
    let a = gotconv(tape, pv, input, &p.first)?;
    let b = gotconv(tape, pv, &a, &p.second)?;
    residual(tape, input, b)
}
