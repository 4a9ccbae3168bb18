use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Pooling};
use crate::backbone::Backbone;
use crate::eksa::EksaLayer;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::tensor::{Tape, Tensor, Var};

/// Three fully connected layers with rectifiers between them.
#[derive(Debug, Clone)]
pub struct Head {
    pub layers: [Linear; 3],
}

impl Head {
    pub fn new(inputs: usize, widths: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let l1 = Linear::new(inputs, widths[0], rng);
        let l2 = Linear::new(widths[0], widths[1], rng);
        let l3 = Linear::new(widths[1], widths[2], rng);
        Self { layers: [l1, l2, l3] }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    /// `x: [1×inputs]` to `[1×2]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != [1, self.inputs()] {
            return Err(Error::shape(format!(
                "head expects [1×{}] input, got {:?}",
                self.inputs(),
                tape.shape(x)
            )));
        }
        let h = self.layers[0].forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.relu(h)?;
        self.layers[2].forward(tape, h)
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }
}

/// Value-only head evaluation on a flat feature vector.
pub fn head_forward(head: &Head, x_flat: &[f64]) -> Result<[f64; 2]> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(&Tensor::new(&[1, x_flat.len()], x_flat.to_vec())?);
    let y = head.forward(&mut tape, x)?;
    let out = tape.value(y);
    if out.len() != 2 {
        return Err(Error::shape(format!("head produced {} outputs, expected 2", out.len())));
    }
    Ok([out[0], out[1]])
}

/// Mean over batch and components of the squared error.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

pub fn mse_loss_values(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(sum / (2 * pred.len()) as f64)
}

/// Residual ChebyKAN backbone, optional kernel self-attention, pooling and
/// a three-layer regression head.
#[derive(Debug, Clone)]
pub struct ResKacNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub eksa: Option<EksaLayer>,
    pub head: Head,
}

impl ResKacNet {
    /// Attention dimensions are taken from the backbone output.
    pub fn new(mut config: ModelConfig) -> Result<Self> {
        config.sync_eksa_dims();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config.backbone, &mut rng)?;
        let eksa = config
            .eksa_enabled
            .then(|| EksaLayer::new(config.eksa, &mut rng))
            .transpose()?;
        let width = config.pooling.width(config.eksa.feature_dim, config.eksa.seq_len);
        let head = Head::new(width, config.head_widths, &mut rng);
        Ok(Self {
            config,
            backbone,
            eksa,
            head,
        })
    }

    /// `x: [6×W]` to a `[1×2]` velocity.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != [6, self.config.window_size] {
            return Err(Error::contract(format!(
                "model expects [6×{}] windows, got {:?}",
                self.config.window_size,
                tape.shape(x)
            )));
        }
        let mut h = self.backbone.forward(tape, x)?;
        if let Some(eksa) = &self.eksa {
            h = eksa.forward(tape, h)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Flatten => h,
            Pooling::Mean => tape.mean(h, 1)?,
        };
        let width = tape.shape(pooled).iter().product();
        let flat = tape.reshape(pooled, &[1, width])?;
        self.head.forward(tape, flat)
    }

    pub fn predict(&self, window: &Tensor) -> Result<[f64; 2]> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(window);
        let y = self.forward(&mut tape, x)?;
        let v = tape.value(y);
        Ok([v[0], v[1]])
    }

    /// `(name, shape, values)` of every parameter in canonical order.
    pub fn param_values(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.shape().to_vec(), t.data().to_vec())));
        out
    }
}

impl Module for ResKacNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        if let Some(e) = &self.eksa {
            e.visit(&join(prefix, "eksa"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        if let Some(e) = &mut self.eksa {
            e.visit_mut(&join(prefix, "eksa"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::compact(32);
        cfg.backbone.stage_channels = [4, 4, 8, 8];
        cfg.head_widths = [6, 4, 2];
        cfg
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::new(3, [4, 4, 2], &mut rng);
        head.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        assert_eq!(head_forward(&head, &[1.0, -2.0, 3.0]).unwrap(), [0.0, 0.0]);
        assert!(matches!(head_forward(&head, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn head_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::new(2, [2, 2, 2], &mut rng);
        // fc1 = identity, fc2 = swap, fc3 = 2·identity with bias (1, 0)
        head.layers[0].weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        head.layers[1].weight.data_mut().copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
        head.layers[2].weight.data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 2.0]);
        head.layers[2].bias.data_mut().copy_from_slice(&[1.0, 0.0]);
        // relu clips the negative component after fc1
        assert_eq!(head_forward(&head, &[3.0, -1.0]).unwrap(), [1.0, 6.0]);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss_values(&[[1.0, 0.0]], &[[0.0, 0.0]]).unwrap(), 0.5);
        assert_eq!(mse_loss_values(&[[0.3, 0.1]], &[[0.3, 0.1]]).unwrap(), 0.0);
        let mut tape = Tape::no_grad();
        let p = tape.constant(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let t = tape.constant(&Tensor::zeros(&[1, 2]));
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l)[0], 0.5);
        let bad = tape.constant(&Tensor::zeros(&[2, 2]));
        assert!(matches!(mse_loss(&mut tape, p, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn ablation_drops_attention_parameters() {
        let full = ResKacNet::new(tiny_config()).unwrap();
        let mut cfg = tiny_config();
        cfg.eksa_enabled = false;
        let ablated = ResKacNet::new(cfg).unwrap();
        assert!(full.param_names().iter().any(|n| n.starts_with("eksa.")));
        assert!(!ablated.param_names().iter().any(|n| n.starts_with("eksa.")));
        assert!(ablated.param_count() < full.param_count());
        let x = Tensor::from_fn(&[6, 32], |i| (i as f64 * 0.3).sin());
        assert!(ablated.predict(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_values_match_visit_order() {
        let net = ResKacNet::new(tiny_config()).unwrap();
        let names: Vec<String> = net.param_values().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, net.param_names());
    }
}
