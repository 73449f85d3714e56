//! Recurrent cells built from graph operations.
//!
//! Gate layout along the leading axis of the pre-activations is `[input, forget, output, cell]`.
//! There are no peephole connections.

use crate::error::{contract, Result};

use super::{Graph, Padding, Scalar, Var};

/// Weights of a fully connected LSTM: `w` is `[4d, in + d]` acting on `[x; h]`
/// (or `[4d, d]` for a cell without input), `b` is `[4d]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w: Var,
    pub b: Var,
}

/// Weights of a convolutional LSTM: `k` is `[4·C_h, C_x + C_h, kH, kW]`, `b` is `[4·C_h]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights {
    pub k: Var,
    pub b: Var,
}

fn gated_update<T: Scalar>(g: &mut Graph<T>, gates: Var, c: Var, d: usize) -> Result<(Var, Var)> {
    let i = g.slice(gates, 0, d)?;
    let f = g.slice(gates, d, d)?;
    let o = g.slice(gates, 2 * d, d)?;
    let u = g.slice(gates, 3 * d, d)?;
    let (i, f, o, u) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(u));
    let keep = g.mul(f, c)?;
    let write = g.mul(i, u)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// One step of a fully connected LSTM. `x = None` runs the cell on its recurrent state only.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    x: Option<Var>,
    h: Var,
    c: Var,
    weights: &LstmWeights,
) -> Result<(Var, Var)> {
    let d = g.shape(h)[0];
    if g.shape(h) != [d] || g.shape(c) != [d] {
        return Err(contract!("lstm state shapes {:?} and {:?} must both be [d]", g.shape(h), g.shape(c)));
    }
    if g.shape(weights.w)[0] != 4 * d {
        return Err(contract!("lstm weight has {} rows, expected 4·{}", g.shape(weights.w)[0], d));
    }
    let z = match x {
        Some(x) => g.concat(&[x, h])?,
        None => h,
    };
    let gates = g.linear(z, weights.w, Some(weights.b))?;
    gated_update(g, gates, c, d)
}

/// One step of a convolutional LSTM with stride-1, same-padded gate convolutions over `[x; h]`.
pub fn convlstm_step<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    weights: &ConvLstmWeights,
) -> Result<(Var, Var)> {
    let (xs, hs) = (g.shape(x).to_vec(), g.shape(h).to_vec());
    if xs.len() != 3 || hs.len() != 3 {
        return Err(contract!("convLSTM inputs must be [C,H,W]: x {:?}, h {:?}", xs, hs));
    }
    if xs[1..] != hs[1..] {
        return Err(contract!("convLSTM spatial mismatch: x {:?} vs h {:?}", &xs[1..], &hs[1..]));
    }
    if g.shape(c) != hs.as_slice() {
        return Err(contract!("convLSTM cell shape {:?} differs from hidden {:?}", g.shape(c), hs));
    }
    let ch = hs[0];
    if g.shape(weights.k)[0] != 4 * ch {
        return Err(contract!("convLSTM kernel has {} output channels, expected 4·{}", g.shape(weights.k)[0], ch));
    }
    let z = g.concat(&[x, h])?;
    let gates = g.conv2d(z, weights.k, weights.b, 1, Padding::Same)?;
    gated_update(g, gates, c, ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{ParamSet, RngStream, Tensor};

    fn rand(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn lstm_zero_weights() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let w = LstmWeights { w: g.input(Tensor::zeros(&[12, 5])), b: g.input(Tensor::zeros(&[12])) };
        let x = g.input(Tensor::zeros(&[2]));
        let h = g.input(Tensor::zeros(&[3]));
        let c0 = g.input(Tensor::zeros(&[3]));
        let (h1, c1) = lstm_step(&mut g, Some(x), h, c0, &w).unwrap();
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c1).data().iter().all(|&v| v == 0.0));

        let cv = Tensor::new(&[3], vec![0.8, -2.0, 0.3]).unwrap();
        let c = g.input(cv.clone());
        let (h1, c1) = lstm_step(&mut g, Some(x), h, c, &w).unwrap();
        for i in 0..3 {
            let half = cv.data()[i] / 2.0;
            assert!((g.value(c1).data()[i] - half).abs() < 1e-15);
            assert!((g.value(h1).data()[i] - 0.5 * half.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn convlstm_zero_weights() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let mut rng = RngStream::new(1);
        let w = ConvLstmWeights { k: g.input(Tensor::zeros(&[8, 5, 3, 3])), b: g.input(Tensor::zeros(&[8])) };
        let x = g.input(Tensor::zeros(&[3, 4, 4]));
        let h = g.input(Tensor::zeros(&[2, 4, 4]));
        let c0 = g.input(Tensor::zeros(&[2, 4, 4]));
        let (h1, c1) = convlstm_step(&mut g, x, h, c0, &w).unwrap();
        assert!(g.value(h1).data().iter().chain(g.value(c1).data()).all(|&v| v == 0.0));

        let cv = rand(&[2, 4, 4], &mut rng);
        let c = g.input(cv.clone());
        let (_, c1) = convlstm_step(&mut g, x, h, c, &w).unwrap();
        for (a, b) in g.value(c1).data().iter().zip(cv.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn convlstm_on_single_pixel_equals_lstm() {
        let mut rng = RngStream::new(2);
        let (cx, chn) = (3, 4);
        let kernel = rand(&[4 * chn, cx + chn, 3, 3], &mut rng);
        let bias = rand(&[4 * chn], &mut rng);
        // The centre taps of a same-padded 3x3 kernel are the only ones that touch a 1x1 map.
        let dense: Vec<f64> = (0..4 * chn)
            .flat_map(|o| (0..cx + chn).map(move |i| (o, i)))
            .map(|(o, i)| kernel.data()[((o * (cx + chn) + i) * 3 + 1) * 3 + 1])
            .collect();
        let (xv, hv, cv) = (rand(&[cx], &mut rng), rand(&[chn], &mut rng), rand(&[chn], &mut rng));

        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let cw = ConvLstmWeights { k: g.input(kernel), b: g.input(bias.clone()) };
        let x3 = g.input(xv.clone().reshape(&[cx, 1, 1]).unwrap());
        let h3 = g.input(hv.clone().reshape(&[chn, 1, 1]).unwrap());
        let c3 = g.input(cv.clone().reshape(&[chn, 1, 1]).unwrap());
        let (hc, cc) = convlstm_step(&mut g, x3, h3, c3, &cw).unwrap();

        let lw = LstmWeights { w: g.input(Tensor::new(&[4 * chn, cx + chn], dense).unwrap()), b: g.input(bias) };
        let (x, h, c) = (g.input(xv), g.input(hv), g.input(cv));
        let (hl, cl) = lstm_step(&mut g, Some(x), h, c, &lw).unwrap();
        for (a, b) in g.value(hc).data().iter().zip(g.value(hl).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(cc).data().iter().zip(g.value(cl).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let w = ConvLstmWeights { k: g.input(Tensor::zeros(&[8, 5, 3, 3])), b: g.input(Tensor::zeros(&[8])) };
        let x = g.input(Tensor::zeros(&[3, 4, 4]));
        let h = g.input(Tensor::zeros(&[2, 5, 4]));
        assert!(convlstm_step(&mut g, x, h, h, &w).is_err());
        let lw = LstmWeights { w: g.input(Tensor::zeros(&[12, 5])), b: g.input(Tensor::zeros(&[12])) };
        let hv = g.input(Tensor::zeros(&[3]));
        let cv = g.input(Tensor::zeros(&[4]));
        assert!(lstm_step(&mut g, None, hv, cv, &lw).is_err());
    }
}
