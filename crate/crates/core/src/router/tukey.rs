pub const TUKEY_C: f64 = 4.685;
pub const MAD_TO_SIGMA: f64 = 1.4826;
pub const WEIGHT_FLOOR: f64 = 0.05;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tukey bisquare weights from warm-up residuals, floored at 0.05. A zero
/// MAD (including empty input) gives all-ones.
pub fn reweight_tukey(residuals: &[f64]) -> Vec<f64> {
    if residuals.is_empty() {
        return Vec::new();
    }
    let mut v = residuals.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
    let mad = median(&mut dev);
    if mad.is_nan() || mad <= 0.0 {
        return vec![1.0; residuals.len()];
    }
    let cut = TUKEY_C * MAD_TO_SIGMA * mad;
    residuals
        .iter()
        .map(|r| {
            if r.abs() < cut {
                let u = r / cut;
                ((1.0 - u * u).powi(2)).max(WEIGHT_FLOOR)
            } else {
                WEIGHT_FLOOR
            }
        })
        .collect()
}
