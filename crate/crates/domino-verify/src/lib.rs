//! Pass/fail bookkeeping for the acceptance run.

use std::time::Instant;

pub struct Checklist {
    failed: Vec<String>,
    started: Instant,
}

impl Default for Checklist {
    fn default() -> Self {
        Self::new()
    }
}

impl Checklist {
    pub fn new() -> Self {
        Checklist { failed: Vec::new(), started: Instant::now() }
    }

    /// Prints one line for a criterion and remembers failures.
    pub fn check(&mut self, id: &str, pass: bool, detail: impl AsRef<str>) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:<3} {}", detail.as_ref());
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    /// Summary line; the process exit code to use.
    pub fn finish(self) -> i32 {
        let secs = self.started.elapsed().as_secs_f64();
        if self.failed.is_empty() {
            println!("all criteria passed ({secs:.1} s)");
            0
        } else {
            println!("failed: {} ({secs:.1} s)", self.failed.join(", "));
            1
        }
    }
}
