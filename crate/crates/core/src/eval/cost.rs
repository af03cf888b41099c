use crate::autograd::MemCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Bgrl,
    Grace,
}

/// Architecture-dependent constants of the per-step cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModel {
    pub c_encoder: f64,
    pub c_prediction: f64,
    pub c_projection: f64,
    /// Method-specific loss constant.
    pub c_method: f64,
}

impl CostModel {
    pub const UNIT: Self = Self { c_encoder: 1.0, c_prediction: 1.0, c_projection: 1.0, c_method: 1.0 };
}

/// Predicted time/space per update step.
///
/// Bootstrapping runs four encoder passes plus two backward passes and a
/// linear loss; the all-pairs contrastive objective runs two encoder passes
/// plus two backward passes and a quadratic loss.
pub fn predict_cost(method: Method, n: u64, m: u64, model: &CostModel) -> f64 {
    let (n, m) = (n as f64, m as f64);
    match method {
        Method::Bgrl => 6.0 * model.c_encoder * (m + n) + 4.0 * model.c_prediction * n + model.c_method * n,
        Method::Grace => 4.0 * model.c_encoder * (m + n) + 4.0 * model.c_projection * n + model.c_method * n * n,
    }
}

/// Runs `f` against a fresh counter and returns its result with the peak of
/// concurrently live tensor bytes.
pub fn measure_peak_activation<T>(f: impl FnOnce(&MemCounter) -> T) -> (T, usize) {
    let counter = MemCounter::new();
    let out = f(&counter);
    (out, counter.peak())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_constants_reproduce_arithmetic() {
        assert_eq!(predict_cost(Method::Bgrl, 1000, 5000, &CostModel::UNIT), 41_000.0);
        assert_eq!(predict_cost(Method::Grace, 1000, 5000, &CostModel::UNIT), 1_028_000.0);
    }

    #[test]
    fn ratio_doubles_asymptotically() {
        // M = 5N: the ratio tends to N / 42 so consecutive doublings approach 2.
        let ratio = |n: u64| predict_cost(Method::Grace, n, 5 * n, &CostModel::UNIT) / predict_cost(Method::Bgrl, n, 5 * n, &CostModel::UNIT);
        let growth = ratio(1 << 21) / ratio(1 << 20);
        assert!((growth - 2.0).abs() < 1e-3, "{growth}");
        let bgrl = |n: u64| predict_cost(Method::Bgrl, n, 5 * n, &CostModel::UNIT);
        assert_eq!(bgrl(2000), 2.0 * bgrl(1000));
    }
}
