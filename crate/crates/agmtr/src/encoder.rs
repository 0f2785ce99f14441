//! Shared feature encoder: patch embedding, learned positional embeddings,
//! and a short stack of pre-norm transformer blocks. The same parameters
//! encode support, query, and unlabeled images.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::registry::{Init, ParamRegistry, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 4, depth: 2, dim: 64, heads: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if image_h % self.patch_size != 0 || image_w % self.patch_size != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                expected: format!("image divisible by patch {}", self.patch_size),
                got: format!("{image_h}×{image_w}"),
            });
        }
        if self.dim % self.heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                expected: format!("dim divisible by {} heads", self.heads),
                got: format!("{}", self.dim),
            });
        }
        Ok(())
    }

    /// Feature grid for a given image size.
    pub fn feature_hw(&self, image_h: usize, image_w: usize) -> (usize, usize) {
        (image_h / self.patch_size, image_w / self.patch_size)
    }
}

pub fn register_params(
    reg: &mut ParamRegistry,
    init: &Init,
    cfg: &EncoderConfig,
    tokens: usize,
) {
    let c = cfg.dim;
    let patch_dim = cfg.patch_size * cfg.patch_size * 3;
    let mut add = |name: String, t: Tensor| reg.insert(&name, t, true);

    add("encoder.patch_embed.w".into(), init.trunc_normal("encoder.patch_embed.w", vec![patch_dim, c], 0.02));
    add("encoder.patch_embed.b".into(), init.zeros(vec![1, c]));
    add("encoder.pos".into(), init.trunc_normal("encoder.pos", vec![tokens, c], 0.02));
    for b in 0..cfg.depth {
        let p = format!("encoder.block{b}");
        add(format!("{p}.ln1.g"), init.constant(vec![1, c], 1.0));
        add(format!("{p}.ln1.b"), init.zeros(vec![1, c]));
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.attn.{w}"), init.trunc_normal(&format!("{p}.attn.{w}"), vec![c, c], 0.02));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            add(format!("{p}.attn.{bias}"), init.zeros(vec![1, c]));
        }
        add(format!("{p}.ln2.g"), init.constant(vec![1, c], 1.0));
        add(format!("{p}.ln2.b"), init.zeros(vec![1, c]));
        add(format!("{p}.mlp.w1"), init.trunc_normal(&format!("{p}.mlp.w1"), vec![c, 4 * c], 0.02));
        add(format!("{p}.mlp.b1"), init.zeros(vec![1, 4 * c]));
        add(format!("{p}.mlp.w2"), init.trunc_normal(&format!("{p}.mlp.w2"), vec![4 * c, c], 0.02));
        add(format!("{p}.mlp.b2"), init.zeros(vec![1, c]));
    }
    add("encoder.ln_f.g".into(), init.constant(vec![1, c], 1.0));
    add("encoder.ln_f.b".into(), init.zeros(vec![1, c]));
}

/// Rearrange an H×W×3 image into one row per patch.
fn patches(image: &Tensor, patch: usize) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let y = gy * patch + py;
                    let x = gx * patch + px;
                    let base = (y * w + x) * 3;
                    out.extend_from_slice(&image.data()[base..base + 3]);
                }
            }
        }
    }
    Tensor::from_raw(vec![gh * gw, pd], out)
}

fn linear(x: &Var, params: &ParamVars, w: &str, b: &str) -> Var {
    x.matmul(&params.get(w)).add_rowvec(&params.get(b))
}

fn attention(x: &Var, params: &ParamVars, prefix: &str, heads: usize) -> Var {
    let c = x.shape()[1];
    let dh = c / heads;
    let q = linear(x, params, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(x, params, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(x, params, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (from, to) = (head * dh, (head + 1) * dh);
        let qh = q.slice_cols(from, to);
        let kh = k.slice_cols(from, to);
        let vh = v.slice_cols(from, to);
        let attn = qh
            .matmul(&kh.t())
            .mul_scalar(scale)
            .softmax_rows(None)
            .expect("unmasked softmax");
        outputs.push(attn.matmul(&vh));
    }
    let merged = if outputs.len() == 1 {
        outputs.pop().unwrap()
    } else {
        params.graph().concat_cols(&outputs)
    };
    linear(&merged, params, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Encode an image into an (H·W)×C feature matrix on the caller's graph.
/// Pure in (image, parameters); repeated calls are bit-identical.
pub fn encode(params: &ParamVars, cfg: &EncoderConfig, image: &Tensor) -> Result<Var> {
    assert_eq!(image.rank(), 3, "encode expects H×W×3");
    cfg.validate(image.shape()[0], image.shape()[1])?;

    let graph = params.graph().clone();
    let patch_rows = graph.constant(patches(image, cfg.patch_size));
    let mut x = linear(&patch_rows, params, "encoder.patch_embed.w", "encoder.patch_embed.b");
    x = x.add(&params.get("encoder.pos"));

    for b in 0..cfg.depth {
        let p = format!("encoder.block{b}");
        let h = x.layer_norm(
            &params.get(&format!("{p}.ln1.g")),
            &params.get(&format!("{p}.ln1.b")),
            1e-5,
        );
        x = x.add(&attention(&h, params, &format!("{p}.attn"), cfg.heads));
        let h2 = x.layer_norm(
            &params.get(&format!("{p}.ln2.g")),
            &params.get(&format!("{p}.ln2.b")),
            1e-5,
        );
        let mlp = linear(&h2, params, &format!("{p}.mlp.w1"), &format!("{p}.mlp.b1"))
            .gelu();
        let mlp = linear(&mlp, params, &format!("{p}.mlp.w2"), &format!("{p}.mlp.b2"));
        x = x.add(&mlp);
    }
    Ok(x.layer_norm(&params.get("encoder.ln_f.g"), &params.get("encoder.ln_f.b"), 1e-5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig, image_hw: usize) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        let init = Init { seed: 9 };
        let tokens = (image_hw / cfg.patch_size) * (image_hw / cfg.patch_size);
        register_params(&mut reg, &init, cfg, tokens);
        reg
    }

    fn rand_image(rng: &mut ChaCha8Rng, hw: usize) -> Tensor {
        Tensor::from_raw(
            vec![hw, hw, 3],
            (0..hw * hw * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn output_shape_is_patch_grid_by_dim() {
        let cfg = EncoderConfig::default();
        let reg = setup(&cfg, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = rand_image(&mut rng, 32);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let f = encode(&params, &cfg, &image).unwrap();
        assert_eq!(f.shape(), vec![64, 64]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig { patch_size: 4, depth: 2, dim: 16, heads: 2 };
        let reg = setup(&cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = rand_image(&mut rng, 16);
        let run = || {
            let graph = Graph::new();
            let params = ParamVars::new(&graph, &reg);
            encode(&params, &cfg, &image).unwrap().value()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn single_patch_change_moves_features() {
        let cfg = EncoderConfig { patch_size: 4, depth: 2, dim: 16, heads: 2 };
        let reg = setup(&cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = rand_image(&mut rng, 16);
        let mut other = image.clone();
        other.data_mut()[0] += 0.5; // one pixel in the first patch

        let encode_one = |img: &Tensor| {
            let graph = Graph::new();
            let params = ParamVars::new(&graph, &reg);
            encode(&params, &cfg, img).unwrap().value()
        };
        let (a, b) = (encode_one(&image), encode_one(&other));
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn rejects_indivisible_image() {
        let cfg = EncoderConfig::default();
        let reg = setup(&cfg, 32);
        let image = Tensor::zeros(vec![30, 30, 3]);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        assert!(encode(&params, &cfg, &image).is_err());
    }

    #[test]
    fn weight_sharing_across_roles() {
        let cfg = EncoderConfig { patch_size: 4, depth: 1, dim: 16, heads: 2 };
        let reg = setup(&cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        let names_for = |img: &Tensor| {
            let graph = Graph::new();
            let params = ParamVars::new(&graph, &reg);
            encode(&params, &cfg, img).unwrap();
            params.used_names()
        };
        let support = names_for(&rand_image(&mut rng, 16));
        let query = names_for(&rand_image(&mut rng, 16));
        let unlabeled = names_for(&rand_image(&mut rng, 16));
        assert_eq!(support, query);
        assert_eq!(query, unlabeled);
        assert!(support.iter().all(|n| n.starts_with("encoder.")));
    }
}
