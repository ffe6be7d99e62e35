//! Dormand-Prince 5(4) step with continuous extension.

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Accepted or trial step: end state, FSAL derivative, error norm and the
/// five interpolation coefficient vectors packed contiguously.
pub(crate) struct Trial {
    pub y1: Vec<f64>,
    pub k7: Vec<f64>,
    pub err: f64,
    pub rcont: Vec<f64>,
}

pub(crate) fn trial_step<E, F>(
    f: &mut F,
    t: f64,
    y: &[f64],
    k1: &[f64],
    h: f64,
    atol: f64,
    rtol: f64,
) -> Result<Trial, E>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let n = y.len();
    let mut tmp = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    for i in 0..n {
        tmp[i] = y[i] + h * A21 * k1[i];
    }
    f(t + C2 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    f(t + C3 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    f(t + C4 * h, &tmp, &mut k4)?;
    for i in 0..n {
        tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    f(t + C5 * h, &tmp, &mut k5)?;
    for i in 0..n {
        tmp[i] =
            y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    f(t + h, &tmp, &mut k6)?;
    let mut y1 = vec![0.0; n];
    for i in 0..n {
        y1[i] =
            y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
    }
    f(t + h, &y1, &mut k7)?;
    let mut acc = 0.0;
    for i in 0..n {
        let e = h
            * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sk = atol + rtol * y[i].abs().max(y1[i].abs());
        acc += (e / sk) * (e / sk);
    }
    let err = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
    let mut rcont = vec![0.0; 5 * n];
    for i in 0..n {
        let dy = y1[i] - y[i];
        let bspl = h * k1[i] - dy;
        rcont[i] = y[i];
        rcont[n + i] = dy;
        rcont[2 * n + i] = bspl;
        rcont[3 * n + i] = dy - h * k7[i] - bspl;
        rcont[4 * n + i] = h
            * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
    }
    Ok(Trial { y1, k7, err, rcont })
}

/// Evaluate the continuous extension at fraction `theta` of the step.
pub(crate) fn dense(rcont: &[f64], theta: f64, out: &mut [f64]) {
    let n = out.len();
    let th1 = 1.0 - theta;
    for i in 0..n {
        out[i] = rcont[i]
            + theta
                * (rcont[n + i]
                    + th1 * (rcont[2 * n + i] + theta * (rcont[3 * n + i] + th1 * rcont[4 * n + i])));
    }
}
