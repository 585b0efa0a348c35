//! Runner for the acceptance suite: each criterion is a closure returning a
//! one-line summary, and a panic or `Err` marks it failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

pub type Check = Result<String, String>;

pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub run: Box<dyn FnOnce() -> Check>,
}

pub fn criterion(id: u32, name: &'static str, run: impl FnOnce() -> Check + 'static) -> Criterion {
    Criterion {
        id,
        name,
        run: Box::new(run),
    }
}

/// Runs every criterion in order and prints one line each. Returns the
/// number that failed.
pub fn run_all(criteria: Vec<Criterion>) -> usize {
    let mut failed = 0;
    for c in criteria {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {:<28} {detail} ({secs:.1}s)", c.id, c.name);
    }
    failed
}

/// `Err(msg)` unless `cond`.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
