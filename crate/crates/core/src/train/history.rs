use std::fmt::Write;

/// Mean losses `(L_r, L_c, L_t)` over a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub recon: f64,
    pub class: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Train-split losses of the untrained model (epoch 0).
    pub initial: Option<LossRecord>,
    /// Mean training-batch losses, one per epoch.
    pub train: Vec<LossRecord>,
    /// Held-out losses after each epoch (inference mode).
    pub validation: Vec<LossRecord>,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }

    /// CSV with header `epoch,split,L_r,L_c,L_t`; row `0,train` is the
    /// untrained model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,L_r,L_c,L_t\n");
        let mut row = |e: usize, split: &str, r: &LossRecord| {
            let _ = writeln!(out, "{e},{split},{},{},{}", r.recon, r.class, r.total);
        };
        if let Some(r) = &self.initial {
            row(0, "train", r);
        }
        for e in 0..self.train.len().max(self.validation.len()) {
            if let Some(r) = self.train.get(e) {
                row(e + 1, "train", r);
            }
            if let Some(r) = self.validation.get(e) {
                row(e + 1, "validation", r);
            }
        }
        out
    }
}
