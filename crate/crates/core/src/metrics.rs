/// Scalars logged for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub step: u64,
    /// Raw objective value.
    pub loss: f64,
    /// `2 + loss` for the bootstrapped objective (zero at perfect agreement);
    /// equal to `loss` for the other methods.
    pub loss_shifted: f64,
    pub lr: f64,
    /// EMA decay applied to the target; zero for methods without one.
    pub tau: f64,
    pub spread: f64,
    pub norm: f64,
    pub peak_bytes: u64,
    /// Validation accuracy, when the trainer evaluated at this step.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub val_acc: Option<f64>,
}
