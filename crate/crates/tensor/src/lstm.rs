use crate::{Element, Tape, TensorError, Var};

/// Weights of one convolutional LSTM cell as bound on a tape.
///
/// `input` maps the cell input to the four stacked gates `(i, f, o, g)` with
/// the cell's stride; `hidden` maps the previous hidden state to the same
/// gates at stride 1.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights {
    pub input: Var,
    pub hidden: Var,
    pub bias: Var,
    pub stride: usize,
}

/// One step of a convolutional LSTM.
///
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')` with sigmoid `i, f, o` and tanh `g`.
pub fn conv_lstm_cell<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    (h, c): (Var, Var),
    wts: &ConvLstmWeights,
) -> Result<(Var, Var), TensorError> {
    let kx = tape.shape(wts.input)[2];
    let kh = tape.shape(wts.hidden)[2];
    let from_x = tape.conv2d(x, wts.input, Some(wts.bias), wts.stride, kx / 2)?;
    let from_h = tape.conv2d(h, wts.hidden, None, 1, kh / 2)?;
    let gates = tape.add(from_x, from_h).map_err(|e| match e {
        TensorError::Shape { detail, .. } => {
            TensorError::shape("conv_lstm_cell", format!("input and hidden state disagree: {detail}"))
        }
        other => other,
    })?;
    let hidden = tape.shape(c)[1];
    let i = tape.slice_channels(gates, 0, hidden)?;
    let f = tape.slice_channels(gates, hidden, hidden)?;
    let o = tape.slice_channels(gates, 2 * hidden, hidden)?;
    let g = tape.slice_channels(gates, 3 * hidden, hidden)?;
    let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
