//! The location-prediction scoring architectures.
//!
//! All five models map a `C×H×W` feature grid (and, except for the
//! text-blind variant, an encoded description vector) to a probability
//! distribution over the `H×W` cells.

use rand::Rng;

use super::SdrError;
use crate::tensor::{param, ParamStore, ParamTensors, Tensor, TensorError, TensorResult};

/// Which scoring architecture a model instance runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdrModelKind {
    /// Encoder-decoder with per-level text-derived 1×1 kernels.
    LingUnet,
    /// Same encoder-decoder with the text conditioning removed.
    UNet,
    /// Text vector appended to every pixel's channel vector, per-pixel MLP.
    Concat,
    /// Concat plus one 5×5 mixing convolution before the MLP.
    ConcatConv,
    /// Text projected to a full 5×5 convolution kernel.
    Text2Conv,
}

impl SdrModelKind {
    pub fn label(self) -> &'static str {
        match self {
            SdrModelKind::LingUnet => "lingunet",
            SdrModelKind::UNet => "unet",
            SdrModelKind::Concat => "concat",
            SdrModelKind::ConcatConv => "concatconv",
            SdrModelKind::Text2Conv => "text2conv",
        }
    }

    pub fn parse(s: &str) -> Option<SdrModelKind> {
        match s {
            "lingunet" => Some(SdrModelKind::LingUnet),
            "unet" => Some(SdrModelKind::UNet),
            "concat" => Some(SdrModelKind::Concat),
            "concatconv" => Some(SdrModelKind::ConcatConv),
            "text2conv" => Some(SdrModelKind::Text2Conv),
            _ => None,
        }
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, SdrModelKind::UNet)
    }
}

/// Per-level text projection width at the published scale: each slice maps
/// to `C·C` values reshaped to a 1×1×C×C kernel (16,384 for C = 128).
pub fn real_scale_projection_len(channels: usize) -> usize {
    channels * channels
}

/// Text-to-kernel projection width at the published scale: `5·5·C·C`
/// values reshaped to a 5×5×C×C kernel (409,600 for C = 128).
pub fn real_scale_text_kernel_len(channels: usize) -> usize {
    5 * 5 * channels * channels
}

/// A scoring model: architecture kind plus the dimensions its parameters
/// were created with. Encoder/decoder convolutions are 5×5, stride 1,
/// padding 2 throughout, so spatial dimensions are preserved at every
/// level.
#[derive(Debug, Clone)]
pub struct SdrModel {
    pub kind: SdrModelKind,
    pub channels: usize,
    pub text_dim: usize,
    /// Number of convolution/deconvolution levels (text-conditioned kinds).
    pub levels: usize,
    /// Hidden width of the two-layer per-pixel MLP head.
    pub mlp_hidden: usize,
    prefix: String,
}

const KERNEL: usize = 5;
const PADDING: usize = 2;

impl SdrModel {
    /// Registers all parameters for the chosen architecture, initialized
    /// uniformly on `[-bound, bound]`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: SdrModelKind,
        channels: usize,
        text_dim: usize,
        levels: usize,
        mlp_hidden: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<SdrModel, SdrError> {
        if kind.uses_text() && text_dim == 0 {
            return Err(TensorError::Invalid {
                op: "sdr_model",
                msg: "text dimension must be positive".into(),
            }
            .into());
        }
        let model = SdrModel {
            kind,
            channels,
            text_dim,
            levels,
            mlp_hidden,
            prefix: prefix.to_string(),
        };
        let c = channels;
        match kind {
            SdrModelKind::LingUnet | SdrModelKind::UNet => {
                if levels == 0 {
                    return Err(TensorError::Invalid {
                        op: "sdr_model",
                        msg: "need at least one level".into(),
                    }
                    .into());
                }
                if kind == SdrModelKind::LingUnet && text_dim % levels != 0 {
                    return Err(TensorError::Invalid {
                        op: "sdr_model",
                        msg: format!("text dimension {text_dim} not divisible by {levels} levels"),
                    }
                    .into());
                }
                for k in 1..=levels {
                    store.init_uniform(
                        &model.name(&format!("cnn{k}.kernel")),
                        &[c, c, KERNEL, KERNEL],
                        bound,
                        rng,
                    )?;
                    store.init_uniform(&model.name(&format!("cnn{k}.bias")), &[c], bound, rng)?;
                    if kind == SdrModelKind::LingUnet {
                        store.init_uniform(
                            &model.name(&format!("txt{k}.proj")),
                            &[c * c, text_dim / levels],
                            bound,
                            rng,
                        )?;
                    }
                    // The top deconvolution consumes the concatenation of
                    // the level above with this level's feature map.
                    let deconv_in = if k == levels { c } else { 2 * c };
                    store.init_uniform(
                        &model.name(&format!("deconv{k}.kernel")),
                        &[deconv_in, c, KERNEL, KERNEL],
                        bound,
                        rng,
                    )?;
                    store.init_uniform(&model.name(&format!("deconv{k}.bias")), &[c], bound, rng)?;
                }
                // Single-layer per-pixel scorer with a ReLU non-linearity.
                store.init_uniform(&model.name("head.w"), &[1, c], bound, rng)?;
                store.init_uniform(&model.name("head.b"), &[1], bound, rng)?;
            }
            SdrModelKind::Concat => {
                model.init_mlp(store, c + text_dim, bound, rng)?;
            }
            SdrModelKind::ConcatConv => {
                let mixed = c + text_dim;
                store.init_uniform(
                    &model.name("mix.kernel"),
                    &[mixed, mixed, KERNEL, KERNEL],
                    bound,
                    rng,
                )?;
                store.init_uniform(&model.name("mix.bias"), &[mixed], bound, rng)?;
                model.init_mlp(store, mixed, bound, rng)?;
            }
            SdrModelKind::Text2Conv => {
                store.init_uniform(
                    &model.name("kernel.proj"),
                    &[KERNEL * KERNEL * c * c, text_dim],
                    bound,
                    rng,
                )?;
                model.init_mlp(store, c, bound, rng)?;
            }
        }
        Ok(model)
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn init_mlp(
        &self,
        store: &mut ParamStore,
        input: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<(), SdrError> {
        store.init_uniform(&self.name("mlp.w1"), &[self.mlp_hidden, input], bound, rng)?;
        store.init_uniform(&self.name("mlp.b1"), &[self.mlp_hidden], bound, rng)?;
        store.init_uniform(&self.name("mlp.w2"), &[1, self.mlp_hidden], bound, rng)?;
        store.init_uniform(&self.name("mlp.b2"), &[1], bound, rng)?;
        Ok(())
    }

    /// Runs the model. `text` is required for every kind except the
    /// text-blind variant, which never touches it.
    pub fn forward(
        &self,
        params: &ParamTensors,
        features: &Tensor,
        text: Option<&Tensor>,
    ) -> TensorResult {
        let shape = features.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "sdr_forward",
                lhs: shape,
                rhs: vec![self.channels, 0, 0],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let scores = match self.kind {
            SdrModelKind::LingUnet => {
                let text = text.ok_or_else(|| TensorError::Invalid {
                    op: "sdr_forward",
                    msg: "this architecture needs a text vector".into(),
                })?;
                self.unet_scores(params, features, Some(text), h, w)?
            }
            SdrModelKind::UNet => self.unet_scores(params, features, None, h, w)?,
            SdrModelKind::Concat => {
                let joint = self.concat_text(params, features, text, h, w)?;
                self.mlp_scores(params, &joint, h, w)?
            }
            SdrModelKind::ConcatConv => {
                let joint = self.concat_text(params, features, text, h, w)?;
                let mixed = joint
                    .conv2d(param(params, &self.name("mix.kernel"))?, 1, PADDING)?
                    .add_chan_bias(param(params, &self.name("mix.bias"))?)?;
                self.mlp_scores(params, &mixed, h, w)?
            }
            SdrModelKind::Text2Conv => {
                let text = text.ok_or_else(|| TensorError::Invalid {
                    op: "sdr_forward",
                    msg: "this architecture needs a text vector".into(),
                })?;
                let c = self.channels;
                let kernel = param(params, &self.name("kernel.proj"))?
                    .matvec(text)?
                    .reshape(&[c, c, KERNEL, KERNEL])?;
                let conved = features.conv2d(&kernel, 1, PADDING)?;
                self.mlp_scores(params, &conved, h, w)?
            }
        };
        scores.softmax_pixels()
    }

    /// The encoder/decoder trunk shared by the text-conditioned and
    /// text-blind variants: when `text` is absent the 1×1 text kernels are
    /// skipped and each level's feature map passes through unchanged.
    fn unet_scores(
        &self,
        params: &ParamTensors,
        features: &Tensor,
        text: Option<&Tensor>,
        h: usize,
        w: usize,
    ) -> TensorResult {
        let m = self.levels;
        let c = self.channels;
        let slices = match text {
            Some(t) => Some(t.split0(m)?),
            None => None,
        };
        let mut f_k = features.clone();
        let mut gated: Vec<Tensor> = Vec::with_capacity(m);
        for k in 1..=m {
            f_k = f_k
                .conv2d(param(params, &self.name(&format!("cnn{k}.kernel")))?, 1, PADDING)?
                .add_chan_bias(param(params, &self.name(&format!("cnn{k}.bias")))?)?;
            let g_k = match &slices {
                Some(slices) => {
                    let kernel = param(params, &self.name(&format!("txt{k}.proj")))?
                        .matvec(&slices[k - 1])?
                        .reshape(&[c, c, 1, 1])?;
                    f_k.conv2d(&kernel, 1, 0)?
                }
                None => f_k.clone(),
            };
            gated.push(g_k);
        }
        let mut h_k: Option<Tensor> = None;
        for k in (1..=m).rev() {
            let input = match &h_k {
                None => gated[k - 1].clone(),
                Some(above) => above.concat0(&gated[k - 1])?,
            };
            let out = input
                .deconv2d(param(params, &self.name(&format!("deconv{k}.kernel")))?, 1, PADDING)?
                .add_chan_bias(param(params, &self.name(&format!("deconv{k}.bias")))?)?;
            h_k = Some(out);
        }
        let trunk = h_k.expect("at least one level");
        // Per-pixel single-layer perceptron with a ReLU non-linearity on
        // the channel vector. Rectifying the input rather than the score
        // keeps the scorer's gradient alive at any initialization.
        let flat = trunk.relu().reshape(&[c, h * w])?;
        param(params, &self.name("head.w"))?
            .matmul(&flat)?
            .add_col_bias(param(params, &self.name("head.b"))?)?
            .reshape(&[h, w])
    }

    fn concat_text(
        &self,
        params: &ParamTensors,
        features: &Tensor,
        text: Option<&Tensor>,
        h: usize,
        w: usize,
    ) -> TensorResult {
        let _ = params;
        let text = text.ok_or_else(|| TensorError::Invalid {
            op: "sdr_forward",
            msg: "this architecture needs a text vector".into(),
        })?;
        let tiled = text.broadcast_pixels(h, w)?;
        features.concat0(&tiled)
    }

    /// Two fully-connected layers applied per pixel: ReLU after the first,
    /// scalar score out of the second.
    fn mlp_scores(&self, params: &ParamTensors, x: &Tensor, h: usize, w: usize) -> TensorResult {
        let shape = x.shape();
        let flat = x.reshape(&[shape[0], h * w])?;
        let hidden = param(params, &self.name("mlp.w1"))?
            .matmul(&flat)?
            .add_col_bias(param(params, &self.name("mlp.b1"))?)?
            .relu();
        param(params, &self.name("mlp.w2"))?
            .matmul(&hidden)?
            .add_col_bias(param(params, &self.name("mlp.b2"))?)?
            .reshape(&[h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_features(tape: &Tape, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        tape.constant(
            &[c, h, w],
            (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn toy_text(tape: &Tape, dim: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        tape.constant(&[dim], (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn build(kind: SdrModelKind, seed: u64) -> (ParamStore, SdrModel) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let model =
            SdrModel::init(&mut store, "m", kind, 4, 8, 2, 8, 0.1, &mut r).unwrap();
        (store, model)
    }

    #[test]
    fn real_scale_projection_sizes() {
        assert_eq!(real_scale_projection_len(128), 16_384);
        assert_eq!(real_scale_text_kernel_len(128), 409_600);
    }

    #[test]
    fn every_forward_is_a_distribution() {
        for (i, kind) in [
            SdrModelKind::LingUnet,
            SdrModelKind::UNet,
            SdrModelKind::Concat,
            SdrModelKind::ConcatConv,
            SdrModelKind::Text2Conv,
        ]
        .into_iter()
        .enumerate()
        {
            let (store, model) = build(kind, i as u64);
            let tape = Tape::new();
            let mut binding = store.bind(&tape);
            let params = binding.all_params(&store).unwrap();
            let features = toy_features(&tape, 4, 4, 8, 100 + i as u64);
            let text = toy_text(&tape, 8, 200 + i as u64);
            let dist = model
                .forward(&params, &features, Some(&text))
                .unwrap_or_else(|e| panic!("{}: {e}", kind.label()));
            assert_eq!(dist.shape(), vec![4, 8]);
            let data = dist.data();
            let sum: f64 = data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{}: sum {sum}", kind.label());
            assert!(data.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn text_dim_must_divide_levels() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let err = SdrModel::init(
            &mut store,
            "m",
            SdrModelKind::LingUnet,
            4,
            7,
            2,
            8,
            0.1,
            &mut r,
        );
        assert!(err.is_err());
    }

    #[test]
    fn unet_ignores_text_entirely() {
        let (store, model) = build(SdrModelKind::UNet, 7);
        let tape = Tape::new();
        let mut binding = store.bind(&tape);
        let params = binding.all_params(&store).unwrap();
        let features = toy_features(&tape, 4, 4, 8, 1);
        let t1 = toy_text(&tape, 8, 2);
        let t2 = toy_text(&tape, 8, 3);
        let a = model.forward(&params, &features, Some(&t1)).unwrap().data();
        let b = model.forward(&params, &features, Some(&t2)).unwrap().data();
        let c = model.forward(&params, &features, None).unwrap().data();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn lingunet_depends_on_text() {
        let (store, model) = build(SdrModelKind::LingUnet, 8);
        let tape = Tape::new();
        let mut binding = store.bind(&tape);
        let params = binding.all_params(&store).unwrap();
        let features = toy_features(&tape, 4, 4, 8, 1);
        let t1 = toy_text(&tape, 8, 2);
        let t2 = toy_text(&tape, 8, 3);
        let a = model.forward(&params, &features, Some(&t1)).unwrap().data();
        let b = model.forward(&params, &features, Some(&t2)).unwrap().data();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12));
    }

    #[test]
    fn concat_mlp_is_pixelwise_local() {
        // Swapping two pixels' feature columns swaps exactly those two
        // output scores.
        let (store, model) = build(SdrModelKind::Concat, 9);
        let tape = Tape::new();
        let mut binding = store.bind(&tape);
        let params = binding.all_params(&store).unwrap();
        let mut r = rng(10);
        let (c, h, w) = (4usize, 4usize, 8usize);
        let mut raw: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let text = toy_text(&tape, 8, 11);
        let f1 = tape.constant(&[c, h, w], raw.clone()).unwrap();
        let d1 = model.forward(&params, &f1, Some(&text)).unwrap().data();
        // Swap pixels (0,0) and (2,5) across all channels.
        let (p1, p2) = (0usize, 2 * w + 5);
        for ch in 0..c {
            raw.swap(ch * h * w + p1, ch * h * w + p2);
        }
        let f2 = tape.constant(&[c, h, w], raw).unwrap();
        let d2 = model.forward(&params, &f2, Some(&text)).unwrap().data();
        assert!((d1[p1] - d2[p2]).abs() < 1e-12);
        assert!((d1[p2] - d2[p1]).abs() < 1e-12);
        for i in 0..h * w {
            if i != p1 && i != p2 {
                assert!((d1[i] - d2[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text2conv_zero_text_gives_uniform_with_zero_mlp_bias() {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let model = SdrModel::init(
            &mut store,
            "m",
            SdrModelKind::Text2Conv,
            3,
            6,
            2,
            8,
            0.1,
            &mut r,
        )
        .unwrap();
        for name in ["m.mlp.b1", "m.mlp.b2"] {
            let zeros = vec![0.0; store.values(name).unwrap().len()];
            store.values_mut(name).unwrap().copy_from_slice(&zeros);
        }
        let tape = Tape::new();
        let mut binding = store.bind(&tape);
        let params = binding.all_params(&store).unwrap();
        let features = toy_features(&tape, 3, 4, 6, 13);
        let zero_text = tape.zeros(&[6]);
        let dist = model.forward(&params, &features, Some(&zero_text)).unwrap();
        // Zero text -> zero kernel -> zero conv output -> identical scores
        // at every pixel -> uniform softmax.
        let expect = 1.0 / 24.0;
        for p in dist.data() {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    fn gradcheck_kind(kind: SdrModelKind, seed: u64) -> f64 {
        let (store, model) = build(kind, seed);
        let mut r = rng(300 + seed);
        let feat_raw: Vec<f64> = (0..4 * 4 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let text_raw: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let target = super::super::gaussian_target(12.0, 9.0, 4, 8, 4.0, 1.5)
            .unwrap()
            .probs()
            .to_vec();
        let flat = store.flatten();
        finite_diff_check(
            |tape, v| {
                let params = store.tensors_from_flat(v)?;
                let features = tape.constant(&[4, 4, 8], feat_raw.clone())?;
                let text = tape.constant(&[8], text_raw.clone())?;
                let dist = model.forward(&params, &features, Some(&text))?;
                dist.kl_from_target(&target)
            },
            &flat,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn lingunet_full_gradient_check() {
        let err = gradcheck_kind(SdrModelKind::LingUnet, 21);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn concat_family_gradient_checks() {
        for (kind, seed) in [
            (SdrModelKind::Concat, 22),
            (SdrModelKind::ConcatConv, 23),
            (SdrModelKind::Text2Conv, 24),
        ] {
            let err = gradcheck_kind(kind, seed);
            assert!(err < 1e-4, "{}: max rel err {err}", kind.label());
        }
    }
}
