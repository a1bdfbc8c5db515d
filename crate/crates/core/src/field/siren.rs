//! Batched sinusoidal MLP with forward tangent propagation and a reverse
//! pass over the tangent-augmented graph.
//!
//! Columns are samples. A forward pass carries `1 + m` column blocks of
//! width `n`: block 0 holds values, block `k` the directional derivative
//! along the `k`-th input tangent. Every block goes through one matrix
//! product per layer, so tangents cost one wider GEMM rather than extra
//! passes. Optional second-order blocks carry `t_j^T H t_i` for requested
//! tangent pairs (evaluation only).
//!
//! The reverse pass differentiates any scalar built from the value and
//! tangent blocks with respect to parameters and inputs, which is what the
//! gradient-dependent losses need.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

/// One affine layer, `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// `sin(omega (W x + b))` hidden layers followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Siren {
    pub layers: Vec<Dense>,
    pub omega: f64,
}

/// Stacked column blocks: `[values | tangent_1 | ... | tangent_m | pairs...]`.
#[derive(Clone, Debug)]
pub struct Blocks {
    pub data: Array2<f64>,
    pub n: usize,
}

impl Blocks {
    pub fn block(&self, k: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![.., k * self.n..(k + 1) * self.n])
    }

    pub fn channels(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.data.ncols() / self.n
        }
    }

    /// Stacks a value block with tangent blocks of the same shape.
    pub fn stack<'a>(values: ArrayView2<'a, f64>, tangents: &[ArrayView2<'a, f64>]) -> Self {
        let n = values.ncols();
        let mut views = vec![values];
        views.extend_from_slice(tangents);
        Self {
            data: concatenate(Axis(1), &views).expect("blocks share a row count"),
            n,
        }
    }
}

/// Saved activations for the reverse pass.
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    sin: Vec<Array2<f64>>,
    cos: Vec<Array2<f64>>,
    pre_tangents: Vec<Array2<f64>>,
    n: usize,
    channels: usize,
}

impl Siren {
    /// SIREN initialization: first layer `U(-1/fan_in, 1/fan_in)`, later layers
    /// `U(-sqrt(6/fan_in)/omega, +)`; biases `U(-1/sqrt(fan_in), +)`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], omega: f64, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = if i == 0 {
                    1.0 / fan_in as f64
                } else {
                    (6.0 / fan_in as f64).sqrt() / omega
                };
                let bias_bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound) as f32 as f64);
                let bias = Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bias_bound..=bias_bound) as f32 as f64);
                Dense { weight, bias }
            })
            .collect();
        Self { layers, omega }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Dense> {
        self.layers
            .iter()
            .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
            .collect()
    }

    /// Parameters in layer order, each weight row-major then its bias.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        unflatten(&mut self.layers, flat);
    }

    /// Forward pass over stacked blocks.
    ///
    /// `input` carries `1 + m + pairs.len()` blocks; block `1 + m + q` seeds the
    /// second-order channel of pair `pairs[q] = (i, j)` (tangent indices are
    /// 1-based block indices) and is normally zero. A tape can only be
    /// recorded when `pairs` is empty.
    pub fn forward(&self, input: &Blocks, pairs: &[(usize, usize)], record: bool) -> (Blocks, Option<Tape>) {
        assert!(!(record && !pairs.is_empty()), "tapes cover first-order blocks only");
        let n = input.n;
        let channels = input.channels();
        let first_order = channels - pairs.len();
        let omega = self.omega;
        let mut h = input.data.clone();
        let mut tape = record.then(|| Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            sin: Vec::new(),
            cos: Vec::new(),
            pre_tangents: Vec::new(),
            n,
            channels,
        });
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.dot(&h);
            {
                let mut values = z.slice_mut(s![.., 0..n]);
                values += &layer.bias.view().insert_axis(Axis(1));
            }
            if li == last {
                if let Some(t) = tape.as_mut() {
                    t.inputs.push(h);
                }
                return (Blocks { data: z, n }, tape);
            }
            let mut sin = Array2::zeros((layer.fan_out(), n));
            let mut cos = Array2::zeros((layer.fan_out(), n));
            Zip::from(&mut sin)
                .and(&mut cos)
                .and(z.slice(s![.., 0..n]))
                .for_each(|s, c, &zv| {
                    let (sv, cv) = (omega * zv).sin_cos();
                    *s = sv;
                    *c = cv;
                });
            let mut out = Array2::zeros(z.raw_dim());
            out.slice_mut(s![.., 0..n]).assign(&sin);
            for k in 1..first_order {
                Zip::from(out.slice_mut(s![.., k * n..(k + 1) * n]))
                    .and(z.slice(s![.., k * n..(k + 1) * n]))
                    .and(&cos)
                    .for_each(|o, &zt, &c| *o = omega * c * zt);
            }
            for (q, &(i, j)) in pairs.iter().enumerate() {
                let k = first_order + q;
                let zi = z.slice(s![.., i * n..(i + 1) * n]);
                let zj = z.slice(s![.., j * n..(j + 1) * n]);
                Zip::from(out.slice_mut(s![.., k * n..(k + 1) * n]))
                    .and(z.slice(s![.., k * n..(k + 1) * n]))
                    .and(&zi)
                    .and(&zj)
                    .and(&sin)
                    .and(&cos)
                    .for_each(|o, &zij, &a, &b, &sv, &cv| {
                        *o = omega * cv * zij - omega * omega * sv * a * b;
                    });
            }
            if let Some(t) = tape.as_mut() {
                t.inputs.push(h);
                t.pre_tangents.push(z.slice(s![.., n..]).to_owned());
                t.sin.push(sin);
                t.cos.push(cos);
            }
            h = out;
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse pass. `upstream` is the gradient with respect to every output
    /// block; returns parameter gradients and the gradient with respect to the
    /// value block of the input (tangent inputs are treated as constants).
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>, want_input: bool) -> (Vec<Dense>, Option<Array2<f64>>) {
        let n = tape.n;
        let omega = self.omega;
        let mut grads = self.zeros_like();
        let mut g = upstream.clone();
        let last = self.layers.len() - 1;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let gz = if li == last {
                g
            } else {
                let sin = &tape.sin[li];
                let cos = &tape.cos[li];
                let zt = &tape.pre_tangents[li];
                let mut gz = Array2::zeros(g.raw_dim());
                let mut acc = Array2::<f64>::zeros((layer.fan_out(), n));
                for k in 1..tape.channels {
                    let gk = g.slice(s![.., k * n..(k + 1) * n]);
                    let ztk = zt.slice(s![.., (k - 1) * n..k * n]);
                    Zip::from(gz.slice_mut(s![.., k * n..(k + 1) * n]))
                        .and(&gk)
                        .and(cos)
                        .for_each(|o, &gv, &c| *o = omega * c * gv);
                    Zip::from(&mut acc)
                        .and(&gk)
                        .and(&ztk)
                        .for_each(|a, &gv, &z| *a += gv * z);
                }
                Zip::from(gz.slice_mut(s![.., 0..n]))
                    .and(g.slice(s![.., 0..n]))
                    .and(cos)
                    .and(sin)
                    .and(&acc)
                    .for_each(|o, &g0, &c, &sv, &a| {
                        *o = omega * (g0 * c - omega * sv * a);
                    });
                gz
            };
            let h_in = &tape.inputs[li];
            grads[li].weight = gz.dot(&h_in.t());
            grads[li].bias = gz.slice(s![.., 0..n]).sum_axis(Axis(1));
            if li > 0 || want_input {
                g = layer.weight.t().dot(&gz);
            } else {
                g = Array2::zeros((0, 0));
            }
        }
        let input_grad = want_input.then(|| g.slice(s![.., 0..n]).to_owned());
        (grads, input_grad)
    }
}

pub(crate) fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.weight.len() + l.bias.len()).sum());
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

pub(crate) fn unflatten(layers: &mut [Dense], flat: &[f64]) {
    let mut offset = 0;
    for l in layers {
        for w in l.weight.iter_mut() {
            *w = flat[offset];
            offset += 1;
        }
        for b in l.bias.iter_mut() {
            *b = flat[offset];
            offset += 1;
        }
    }
    assert_eq!(offset, flat.len(), "parameter count mismatch");
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Siren {
        Siren::init(&[3, 8, 8, 2], 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn eval(net: &Siren, x: &[f64; 3]) -> Array1<f64> {
        let input = Blocks {
            data: Array2::from_shape_vec((3, 1), x.to_vec()).unwrap(),
            n: 1,
        };
        net.forward(&input, &[], false).0.data.column(0).to_owned()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Siren::init(&[6, 16, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let b = Siren::init(&[6, 16, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= 1.0 / 6.0));
        assert!(a.flat_params().iter().all(|&w| w as f32 as f64 == w));
    }

    #[test]
    fn tangent_blocks_match_finite_differences() {
        let net = net(2);
        let x = [0.3, -0.2, 0.5];
        let t = [0.6, 0.0, -0.8];
        let values = Array2::from_shape_vec((3, 1), x.to_vec()).unwrap();
        let tangent = Array2::from_shape_vec((3, 1), t.to_vec()).unwrap();
        let out = net
            .forward(&Blocks::stack(values.view(), &[tangent.view()]), &[], false)
            .0;
        let h = 1e-5;
        let plus = eval(&net, &[x[0] + h * t[0], x[1] + h * t[1], x[2] + h * t[2]]);
        let minus = eval(&net, &[x[0] - h * t[0], x[1] - h * t[1], x[2] - h * t[2]]);
        for r in 0..2 {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            assert!((out.block(1)[[r, 0]] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn second_order_block_matches_finite_differences() {
        let net = net(3);
        let x = [0.1, 0.4, -0.3];
        let ti = [1.0, 0.0, 0.0];
        let tj = [0.0, 0.6, 0.8];
        let col = |a: [f64; 3]| Array2::from_shape_vec((3, 1), a.to_vec()).unwrap();
        let input = Blocks::stack(col(x).view(), &[col(ti).view(), col(tj).view(), col([0.0; 3]).view()]);
        let out = net.forward(&input, &[(1, 2)], false).0;
        let h = 1e-4;
        let f = |a: f64, b: f64| {
            eval(
                &net,
                &[
                    x[0] + a * ti[0] + b * tj[0],
                    x[1] + a * ti[1] + b * tj[1],
                    x[2] + a * ti[2] + b * tj[2],
                ],
            )
        };
        let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
        for r in 0..2 {
            assert!(
                (out.block(3)[[r, 0]] - fd[r]).abs() < 1e-6,
                "{} vs {}",
                out.block(3)[[r, 0]],
                fd[r]
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences_through_tangents() {
        // scalar = sum(y) + 0.7 * sum(dy/dt)^2, differentiated w.r.t. params and input
        let mut net = net(4);
        let x = Array2::from_shape_vec((3, 2), vec![0.2, -0.5, 0.1, 0.3, -0.4, 0.6]).unwrap();
        let t = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let scalar = |net: &Siren, x: &Array2<f64>| {
            let out = net.forward(&Blocks::stack(x.view(), &[t.view()]), &[], false).0;
            out.block(0).sum() + 0.7 * out.block(1).mapv(|v| v * v).sum()
        };
        let (out, tape) = net.forward(&Blocks::stack(x.view(), &[t.view()]), &[], true);
        let mut up = Array2::ones(out.data.raw_dim());
        up.slice_mut(s![.., 2..4]).assign(&(out.block(1).to_owned() * 1.4));
        let (grads, gx) = net.backward(&tape.unwrap(), &up, true);
        let analytic = flatten(&grads);
        let base = net.flat_params();
        let h = 1e-6;
        for idx in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[idx] += h;
            net.set_flat_params(&p);
            let fp = scalar(&net, &x);
            p[idx] -= 2.0 * h;
            net.set_flat_params(&p);
            let fm = scalar(&net, &x);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}: {fd} vs {}",
                analytic[idx]
            );
        }
        net.set_flat_params(&base);
        let gx = gx.unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (scalar(&net, &xp) - scalar(&net, &xm)) / (2.0 * h);
                assert!((fd - gx[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
