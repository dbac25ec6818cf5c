//! Image autoencoder (appearance compression to the latent space the
//! denoiser operates in) and the global reference embedder that turns the
//! reference frame into a short token sequence for cross-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Conv2d, Linear, ParamGroup, Params, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial downsampling factor between image space and latent space.
pub const LATENT_FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Channels of the latent feature map (c_z).
    pub latent_channels: usize,
    /// Width of the first encoder stage; later stages scale from it.
    pub base_channels: usize,
    /// Token count produced by the global embedder (L_g).
    pub embed_tokens: usize,
    /// Token dimension of the global embedder (c_g).
    pub embed_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 4,
            base_channels: 16,
            embed_tokens: 16,
            embed_dim: 64,
        }
    }
}

/// Where a latent came from (bookkeeping for windowed inference and tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Frame(usize),
    Reference,
}

/// A latent appearance feature map, stored channel-first `[c_z, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentFrame<S: Scalar> {
    pub data: Tensor<S>,
    pub source: LatentSource,
}

impl<S: Scalar> LatentFrame<S> {
    pub fn new(data: Tensor<S>, source: LatentSource) -> Self {
        assert_eq!(data.shape().len(), 3, "latent must be [c,h,w]");
        LatentFrame { data, source }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    /// Flattened `[(h w), c_z]` view (row-major over spatial positions).
    pub fn tokens(&self) -> Tensor<S> {
        self.data.permuted(&[1, 2, 0]).reshaped(&[self.h() * self.w(), self.channels()])
    }
}

/// Token sequence summarizing the reference frame globally.
#[derive(Debug, Clone)]
pub struct GlobalRefEmbedding<S: Scalar> {
    /// `[L_g, c_g]`
    pub tokens: Tensor<S>,
}

pub struct Codec {
    cfg: CodecConfig,
    enc_stem: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Codec {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: CodecConfig, rng: &mut Rng) -> Self {
        let g = ParamGroup::Codec;
        let b = cfg.base_channels;
        let widths = [b, 2 * b, 4 * b, 4 * b];
        let enc_stem = Conv2d::new(params, "codec.enc.stem", g, 3, widths[0], 3, 1, 1, rng);
        let mut enc_down = Vec::new();
        for i in 0..3 {
            enc_down.push(Conv2d::new(
                params,
                &format!("codec.enc.down{i}"),
                g,
                widths[i],
                widths[i + 1],
                3,
                2,
                1,
                rng,
            ));
        }
        let enc_out = Conv2d::new(params, "codec.enc.out", g, widths[3], cfg.latent_channels, 1, 1, 0, rng);
        let dec_in = Conv2d::new(params, "codec.dec.in", g, cfg.latent_channels, widths[3], 1, 1, 0, rng);
        let mut dec_up = Vec::new();
        for i in 0..3 {
            dec_up.push(Conv2d::new(
                params,
                &format!("codec.dec.up{i}"),
                g,
                widths[3 - i],
                widths[2 - i],
                3,
                1,
                1,
                rng,
            ));
        }
        let dec_out = Conv2d::new(params, "codec.dec.out", g, widths[0], 3, 3, 1, 1, rng);
        Codec {
            cfg,
            enc_stem,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Encoder body on a batched `[n,3,H,W]` node; produces `[n,c_z,H/8,W/8]`.
    pub fn encode_node<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &crate::nn::Binding,
        img: NodeId,
    ) -> NodeId {
        let mut x = self.enc_stem.forward(g, bind, img);
        x = g.silu(x);
        for conv in &self.enc_down {
            x = conv.forward(g, bind, x);
            x = g.silu(x);
        }
        self.enc_out.forward(g, bind, x)
    }

    /// Decoder body; `[n,c_z,h,w]` to `[n,3,8h,8w]`, output in (0,1).
    pub fn decode_node<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &crate::nn::Binding,
        z: NodeId,
    ) -> NodeId {
        let mut x = self.dec_in.forward(g, bind, z);
        x = g.silu(x);
        for conv in &self.dec_up {
            x = g.upsample2x(x);
            x = conv.forward(g, bind, x);
            x = g.silu(x);
        }
        let x = self.dec_out.forward(g, bind, x);
        g.sigmoid_op(x)
    }

    /// Encode one `[3,H,W]` image (values in [0,1]) into a latent frame.
    pub fn vae_encode<S: Scalar>(
        &self,
        params: &Params<S>,
        image: &Tensor<S>,
        source: LatentSource,
    ) -> Result<LatentFrame<S>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(format!("expected [3,H,W] image, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} not divisible by {LATENT_FACTOR}"
            )));
        }
        if image
            .as_slice()
            .iter()
            .any(|v| !v.is_finite() || *v < S::zero() || *v > S::one())
        {
            return Err(Error::invalid("image values must lie in [0,1]".to_string()));
        }
        let mut g = Graph::new();
        let bind = params.bind_frozen(&mut g);
        let x = g.constant(image.reshaped(&[1, 3, h, w]));
        let z = self.encode_node(&mut g, &bind, x);
        let data = g
            .value(z)
            .reshaped(&[self.cfg.latent_channels, h / LATENT_FACTOR, w / LATENT_FACTOR]);
        Ok(LatentFrame::new(data, source))
    }

    /// Decode a latent frame back to a `[3,8h,8w]` image in [0,1].
    pub fn vae_decode<S: Scalar>(
        &self,
        params: &Params<S>,
        latent: &LatentFrame<S>,
    ) -> Result<Tensor<S>> {
        if !latent.data.is_finite() {
            return Err(Error::Numeric("non-finite latent".to_string()));
        }
        let (c, h, w) = (latent.channels(), latent.h(), latent.w());
        let mut g = Graph::new();
        let bind = params.bind_frozen(&mut g);
        let z = g.constant(latent.data.reshaped(&[1, c, h, w]));
        let img = self.decode_node(&mut g, &bind, z);
        Ok(g
            .value(img)
            .reshaped(&[3, h * LATENT_FACTOR, w * LATENT_FACTOR]))
    }
}

pub struct RefEmbedder {
    cfg: CodecConfig,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl RefEmbedder {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: CodecConfig, rng: &mut Rng) -> Self {
        let g = ParamGroup::Embedder;
        let widths = [3usize, 16, 32, 64, cfg.embed_dim];
        let mut convs = Vec::new();
        for i in 0..4 {
            // stride chosen at forward time; stored stride is unused
            convs.push(Conv2d::new(
                params,
                &format!("embedder.conv{i}"),
                g,
                widths[i],
                widths[i + 1],
                3,
                2,
                1,
                rng,
            ));
        }
        let proj = Linear::new(params, "embedder.proj", g, cfg.embed_dim, cfg.embed_dim, rng);
        RefEmbedder { cfg, convs, proj }
    }

    /// `[n,3,H,W]` to `[n, L_g, c_g]`. Four conv stages downsample while the
    /// map is larger than the token grid; an average pool takes it the rest
    /// of the way.
    pub fn embed_node<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &crate::nn::Binding,
        img: NodeId,
    ) -> NodeId {
        let grid = (self.cfg.embed_tokens as f64).sqrt() as usize;
        assert_eq!(grid * grid, self.cfg.embed_tokens, "embed_tokens must be square");
        let mut x = img;
        let mut spatial = g.shape(img)[2];
        for conv in &self.convs {
            let stride = if spatial > grid { 2 } else { 1 };
            x = g.conv2d(x, bind.node(conv.w), bind.node(conv.b), stride, 1);
            x = g.silu(x);
            spatial = g.shape(x)[2];
        }
        if spatial > grid {
            x = g.avg_pool2d(x, spatial / grid);
        }
        let n = g.shape(x)[0];
        let tokens = g.permute(x, &[0, 2, 3, 1]);
        let tokens = g.reshape(tokens, &[n, self.cfg.embed_tokens, self.cfg.embed_dim]);
        self.proj.forward(g, bind, tokens)
    }

    /// Embed one `[3,H,W]` reference image into `L_g` global tokens.
    pub fn embed_reference<S: Scalar>(
        &self,
        params: &Params<S>,
        image: &Tensor<S>,
    ) -> Result<GlobalRefEmbedding<S>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(format!("expected [3,H,W] image, got {s:?}")));
        }
        if s[1] % LATENT_FACTOR != 0 || s[2] % LATENT_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} not divisible by {LATENT_FACTOR}",
                s[1], s[2]
            )));
        }
        let mut g = Graph::new();
        let bind = params.bind_frozen(&mut g);
        let x = g.constant(image.reshaped(&[1, 3, s[1], s[2]]));
        let t = self.embed_node(&mut g, &bind, x);
        Ok(GlobalRefEmbedding {
            tokens: g
                .value(t)
                .reshaped(&[self.cfg.embed_tokens, self.cfg.embed_dim]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Params<f64>, Codec, RefEmbedder) {
        let mut rng = Rng::seed_from(42);
        let mut params = Params::new();
        let cfg = CodecConfig::default();
        let codec = Codec::new(&mut params, cfg, &mut rng);
        let embedder = RefEmbedder::new(&mut params, cfg, &mut rng);
        (params, codec, embedder)
    }

    fn test_image(h: usize, w: usize) -> Tensor<f64> {
        let mut rng = Rng::seed_from(1);
        let data = (0..3 * h * w).map(|_| rng.uniform()).collect();
        Tensor::from_vec(&[3, h, w], data)
    }

    #[test]
    fn encode_shape_contract() {
        let (params, codec, _) = setup();
        let img = test_image(64, 64);
        let z = codec.vae_encode(&params, &img, LatentSource::Reference).unwrap();
        assert_eq!(z.data.shape(), &[4, 8, 8]);
    }

    #[test]
    fn encode_rejects_bad_size() {
        let (params, codec, _) = setup();
        let img = test_image(60, 64);
        assert!(matches!(
            codec.vae_encode(&params, &img, LatentSource::Reference),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn encode_decode_deterministic_roundtrip_shape() {
        let (params, codec, _) = setup();
        let img = test_image(32, 32);
        let z1 = codec.vae_encode(&params, &img, LatentSource::Frame(0)).unwrap();
        let z2 = codec.vae_encode(&params, &img, LatentSource::Frame(0)).unwrap();
        assert_eq!(z1.data.as_slice(), z2.data.as_slice());
        let d1 = codec.vae_decode(&params, &z1).unwrap();
        let d2 = codec.vae_decode(&params, &z2).unwrap();
        assert_eq!(d1.shape(), img.shape());
        assert_eq!(d1.as_slice(), d2.as_slice());
    }

    #[test]
    fn decode_zero_latent_in_range() {
        let (params, codec, _) = setup();
        let z = LatentFrame::new(Tensor::zeros(&[4, 4, 4]), LatentSource::Reference);
        let img = codec.vae_decode(&params, &z).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert!(img.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_rejects_non_finite() {
        let (params, codec, _) = setup();
        let mut t = Tensor::zeros(&[4, 4, 4]);
        t.as_mut_slice()[0] = f64::NAN;
        let z = LatentFrame::new(t, LatentSource::Reference);
        assert!(matches!(codec.vae_decode(&params, &z), Err(Error::Numeric(_))));
    }

    #[test]
    fn embedder_token_contract() {
        let (params, _, embedder) = setup();
        for res in [32usize, 64] {
            let img = test_image(res, res);
            let e = embedder.embed_reference(&params, &img).unwrap();
            assert_eq!(e.tokens.shape(), &[16, 64]);
            let e2 = embedder.embed_reference(&params, &img).unwrap();
            assert_eq!(e.tokens.as_slice(), e2.tokens.as_slice());
        }
    }

    #[test]
    fn latent_tokens_layout() {
        // tokens() must enumerate spatial positions row-major with channels last
        let data = Tensor::<f64>::from_vec(&[2, 2, 2], vec![
            // channel 0
            1., 2., 3., 4., // channel 1
            10., 20., 30., 40.,
        ]);
        let z = LatentFrame::new(data, LatentSource::Reference);
        let t = z.tokens();
        assert_eq!(t.shape(), &[4, 2]);
        assert_eq!(t.as_slice(), &[1., 10., 2., 20., 3., 30., 4., 40.]);
    }
}
