//! Lightweight convolutional encoder mapping a guidance render to a feature
//! map spatially matched to the appearance latent.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Binding, Conv2d, ParamGroup, Params, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel plan of the four conv stages.
pub const MOTION_CHANNELS: [usize; 4] = [16, 32, 96, 256];
/// Stage strides: three halvings, then a size-preserving stage, so the output
/// grid matches the /8 appearance latent.
pub const MOTION_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const MOTION_KERNEL: usize = 4;

/// Output channels of the motion encoder (c0).
pub const MOTION_DIM: usize = MOTION_CHANNELS[3];

/// Encoded guidance feature map, kept in flattened `[(h w), c0]` token form.
#[derive(Debug, Clone)]
pub struct MotionFeature<S: Scalar> {
    pub tokens: Tensor<S>,
    pub h: usize,
    pub w: usize,
}

impl<S: Scalar> MotionFeature<S> {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Channel-first `[c0, h, w]` view.
    pub fn chw(&self) -> Tensor<S> {
        self.tokens
            .reshaped(&[self.h, self.w, self.channels()])
            .permuted(&[2, 0, 1])
    }
}

pub struct MotionEncoder {
    convs: Vec<Conv2d>,
}

impl MotionEncoder {
    pub fn new<S: Scalar>(params: &mut Params<S>, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in MOTION_CHANNELS.iter().zip(MOTION_STRIDES.iter()).enumerate() {
            convs.push(Conv2d::new(
                params,
                &format!("motion.conv{i}"),
                ParamGroup::MotionEncoder,
                cin,
                cout,
                MOTION_KERNEL,
                stride,
                if stride == 2 { 1 } else { 2 },
                rng,
            ));
            cin = cout;
        }
        MotionEncoder { convs }
    }

    /// Batched `[n,3,H,W]` to `[n,c0,H/8,W/8]`.
    pub fn encode_node<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: NodeId) -> NodeId {
        let mut x = x;
        for conv in &self.convs {
            let before = (g.shape(x)[2], g.shape(x)[3]);
            x = conv.forward(g, bind, x);
            if conv.stride == 1 {
                // k=4 s=1 p=2 grows each side by one; crop back to size
                x = g.slice(x, 2, 0, before.0);
                x = g.slice(x, 3, 0, before.1);
            }
            x = g.silu(x);
        }
        x
    }

    /// Encode one `[3,H,W]` guidance render.
    pub fn encode_motion<S: Scalar>(
        &self,
        params: &Params<S>,
        guidance: &Tensor<S>,
    ) -> Result<MotionFeature<S>> {
        let batch = self.encode_motion_batch(params, std::slice::from_ref(guidance))?;
        Ok(batch.into_iter().next().unwrap())
    }

    /// Element-wise application over a sequence of guidance renders.
    pub fn encode_motion_batch<S: Scalar>(
        &self,
        params: &Params<S>,
        guidances: &[Tensor<S>],
    ) -> Result<Vec<MotionFeature<S>>> {
        if guidances.is_empty() {
            return Ok(Vec::new());
        }
        let s0 = guidances[0].shape().to_vec();
        if s0.len() != 3 || s0[0] != 3 {
            return Err(Error::invalid(format!("expected [3,H,W] guidance, got {s0:?}")));
        }
        if s0[1] % 8 != 0 || s0[2] % 8 != 0 {
            return Err(Error::invalid(format!(
                "guidance size {}x{} not divisible by 8",
                s0[1], s0[2]
            )));
        }
        for (i, gd) in guidances.iter().enumerate() {
            if gd.shape() != s0.as_slice() {
                return Err(Error::invalid(format!(
                    "guidance {i} shape {:?} differs from first {:?}",
                    gd.shape(),
                    s0
                )));
            }
        }
        let (h, w) = (s0[1] / 8, s0[2] / 8);
        let mut out = Vec::with_capacity(guidances.len());
        // One frame per pass keeps batch output bit-identical to per-frame calls.
        for gd in guidances {
            let mut g = Graph::new();
            let bind = params.bind_frozen(&mut g);
            let x = g.constant(gd.reshaped(&[1, 3, s0[1], s0[2]]));
            let y = self.encode_node(&mut g, &bind, x);
            let tokens = g
                .value(y)
                .permuted(&[0, 2, 3, 1])
                .reshaped(&[h * w, MOTION_DIM]);
            out.push(MotionFeature { tokens, h, w });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Params<f64>, MotionEncoder) {
        let mut rng = Rng::seed_from(5);
        let mut params = Params::new();
        let enc = MotionEncoder::new(&mut params, &mut rng);
        (params, enc)
    }

    fn guidance(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seed_from(seed);
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect())
    }

    #[test]
    fn shape_contract_64() {
        let (params, enc) = setup();
        let f = enc.encode_motion(&params, &guidance(64, 64, 1)).unwrap();
        assert_eq!((f.h, f.w), (8, 8));
        assert_eq!(f.tokens.shape(), &[64, 256]);
    }

    #[test]
    fn deterministic() {
        let (params, enc) = setup();
        let g = guidance(32, 32, 2);
        let a = enc.encode_motion(&params, &g).unwrap();
        let b = enc.encode_motion(&params, &g).unwrap();
        assert_eq!(a.tokens.as_slice(), b.tokens.as_slice());
    }

    #[test]
    fn batch_matches_per_frame_bitwise() {
        let (params, enc) = setup();
        let gs: Vec<_> = (0..3).map(|i| guidance(32, 32, i)).collect();
        let batch = enc.encode_motion_batch(&params, &gs).unwrap();
        assert_eq!(batch.len(), 3);
        for (i, gd) in gs.iter().enumerate() {
            let single = enc.encode_motion(&params, gd).unwrap();
            assert_eq!(batch[i].tokens.as_slice(), single.tokens.as_slice());
        }
    }

    #[test]
    fn empty_batch() {
        let (params, enc) = setup();
        assert!(enc.encode_motion_batch(&params, &[]).unwrap().is_empty());
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let (params, enc) = setup();
        let gs = vec![guidance(32, 32, 1), guidance(64, 64, 2)];
        assert!(matches!(
            enc.encode_motion_batch(&params, &gs),
            Err(Error::InvalidArgument(_))
        ));
    }
}
