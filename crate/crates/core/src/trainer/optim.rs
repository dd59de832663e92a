use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state over a fixed list of parameter groups.
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, group_sizes: &[usize]) -> Self {
        match config {
            OptimizerConfig::Sgd => Optimizer::Sgd,
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step: 0,
                first: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
                second: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                first,
                second,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(first).zip(second) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
                        *m = *beta1 * *m + (1.0 - *beta1) * g;
                        *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd, &[2]);
        let mut p = vec![1.0, 2.0];
        opt.step(&mut [&mut p], &[&[0.5, -1.0]], 0.1);
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[3]);
        let mut p = vec![0.0; 3];
        opt.step(&mut [&mut p], &[&[4.0, -0.01, 0.0]], 0.5);
        assert!((p[0] + 0.5).abs() < 1e-6);
        assert!((p[1] - 0.5).abs() < 1e-4);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn config_json() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(c, OptimizerConfig::default());
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"sgd"}"#).unwrap();
        assert_eq!(c, OptimizerConfig::Sgd);
    }
}
