/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean routed loss over the epoch's steps.
    pub train_loss: f64,
    /// Fused-score accuracy of the training forward passes, before each update.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Steps on which each head was routed.
    pub routed: Vec<usize>,
    /// λ at the end of the epoch.
    pub lambdas: Vec<f64>,
}

pub fn csv_header(num_heads: usize) -> String {
    let mut h = String::from("epoch,lr,train_loss,train_acc,test_acc,routed_head_histogram");
    for i in 1..=num_heads {
        h.push_str(&format!(",lambda_{i}"));
    }
    h
}

impl EpochMetrics {
    /// Values use the shortest round-trip float formatting, so equal runs give
    /// equal bytes. The histogram is `;`-separated to stay in one column.
    pub fn csv_row(&self) -> String {
        let hist = self.routed.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        let test = self.test_acc.map(|a| a.to_string()).unwrap_or_default();
        let mut row = format!("{},{},{},{},{},{}", self.epoch, self.lr, self.train_loss, self.train_acc, test, hist);
        for l in &self.lambdas {
            row.push_str(&format!(",{l}"));
        }
        row
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let heads = history.first().map_or(1, |m| m.lambdas.len());
    let mut out = csv_header(heads);
    out.push('\n');
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}
