use crate::error::{all_finite, Error, Result};

/// One classical fourth-order Runge–Kutta step of `y' = f(t, y)`.
///
/// Stage order and arithmetic are fixed so that replays are bit-exact:
/// `y + (h/6)·(k1 + 2k2 + 2k3 + k4)` with midpoint states `y + (h/2)·k`.
pub fn rk4_step<F>(t: f64, y: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let half = 0.5 * h;
    let mut stage = |ts: f64, ys: &[f64]| -> Result<Vec<f64>> {
        let d = f(ts, ys)?;
        if d.len() != y.len() {
            return Err(Error::contract(format!(
                "derivative has dimension {}, state has {}",
                d.len(),
                y.len()
            )));
        }
        if !all_finite(&d) {
            return Err(Error::numeric(ts, ys, "non-finite derivative"));
        }
        Ok(d)
    };

    let k1 = stage(t, y)?;
    let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + half * k).collect();
    let k2 = stage(t + half, &y2)?;
    let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + half * k).collect();
    let k3 = stage(t + half, &y3)?;
    let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
    let k4 = stage(t + h, &y4)?;

    let sixth = h / 6.0;
    let next: Vec<f64> = (0..y.len())
        .map(|i| y[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if !all_finite(&next) {
        return Err(Error::numeric(t + h, &next, "non-finite state after step"));
    }
    Ok(next)
}
