use dapnet::HeadKind;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub head: HeadKind,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// Zero-based epoch of the best test accuracy (first on ties).
    pub best_epoch: usize,
    pub runtime_secs: f64,
    pub seed: u64,
    /// Hash of the shared configuration, head kind excluded.
    pub config_hash: String,
    /// Checksum of the backbone weights before training.
    pub init_checksum: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    /// Machine-readable form. Runtime is left out so reruns give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,final_test_acc,best_test_acc,best_epoch,seed,config_hash,init_checksum\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.head.name(),
                r.final_test_acc,
                r.best_test_acc,
                r.best_epoch,
                r.seed,
                r.config_hash,
                r.init_checksum
            ));
        }
        out
    }

    /// Aligned table with accuracies as percentages to two decimals.
    pub fn to_table(&self) -> String {
        let header = ["Method", "Test acc (%)", "Best (%)", "Best epoch", "Runtime (s)", "Config", "Init"];
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    format!("Backbone + {}", r.head.label()),
                    format!("{:.2}", 100.0 * r.final_test_acc),
                    format!("{:.2}", 100.0 * r.best_test_acc),
                    r.best_epoch.to_string(),
                    format!("{:.1}", r.runtime_secs),
                    r.config_hash.chars().take(12).collect(),
                    r.init_checksum.chars().take(12).collect(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| -> String {
            let mut s = format!("{:<w$}", cells[0], w = widths[0]);
            for (cell, w) in cells.iter().zip(&widths).skip(1) {
                s.push_str(&format!("  {cell:>w$}", w = *w));
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&header.map(String::from));
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
        }
        let shared = |f: fn(&ReportRow) -> &str| self.rows.windows(2).all(|w| f(&w[0]) == f(&w[1]));
        if !self.rows.is_empty() {
            out.push_str(&format!(
                "config hash {} across rows, backbone init checksum {} across rows\n",
                if shared(|r| &r.config_hash) { "identical" } else { "DIFFERS" },
                if shared(|r| &r.init_checksum) { "identical" } else { "DIFFERS" },
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(head: HeadKind, acc: f64) -> ReportRow {
        ReportRow {
            head,
            final_test_acc: acc,
            best_test_acc: acc,
            best_epoch: 3,
            runtime_secs: 1.25,
            seed: 0,
            config_hash: "abc".into(),
            init_checksum: "def".into(),
        }
    }

    #[test]
    fn table_formats_percentages() {
        let r = ComparisonReport { rows: vec![row(HeadKind::Gap, 0.95531), row(HeadKind::Dap, 1.0)] };
        let t = r.to_table();
        assert!(t.contains("Backbone + GAP") && t.contains("95.53") && t.contains("100.00"), "{t}");
        assert!(t.contains("identical across rows, backbone init checksum identical"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
