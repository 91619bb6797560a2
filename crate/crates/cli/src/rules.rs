use std::path::Path;

use anyhow::Context;
use klue::rulebase::{self, RuleBase, RuleBaseParams};

use crate::{CliError, CliResult, RulegenArgs};

pub fn print_summary(rb: &RuleBase) {
    say!("{:<8} {:>9} {:>9} {:>9}", "class", "positive", "negative", "converse");
    let (mut p, mut n, mut c) = (0, 0, 0);
    for (k, counts) in rb.class_counts().iter().enumerate() {
        let conv = counts.converse_positive + counts.converse_negative;
        say!(
            "{:<8} {:>9} {:>9} {:>9}",
            format!("y{k}"),
            counts.forward_positive,
            counts.forward_negative,
            conv
        );
        p += counts.forward_positive;
        n += counts.forward_negative;
        c += conv;
    }
    say!("{:<8} {:>9} {:>9} {:>9}", "total", p, n, c);
    let uncovered = rb.usage().iter().filter(|&&u| u == 0).count();
    say!("concepts covered: {} of {}", rb.concepts() - uncovered, rb.concepts());
}

pub fn rulegen(a: &RulegenArgs) -> CliResult {
    let params = RuleBaseParams {
        concepts: a.concepts,
        classes: a.classes,
        rules_per_class: a.rules_per_class,
        q_min: a.qmin,
        q_max: a.qmax,
        p_neg: a.pneg,
        seed: a.seed,
        phase2_negatives: a.phase2_negatives,
    };
    let rb = rulebase::generate(&params)?;
    write_file(&a.out, &rulebase::serialize(&rb))?;
    log::info!("wrote {} rules to {}", rb.rules().len(), a.out.display());
    print_summary(&rb);
    Ok(())
}

pub fn read_rules(path: &Path) -> anyhow::Result<RuleBase> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read rules file `{}`", path.display()))?;
    rulebase::deserialize(&bytes).with_context(|| format!("rules file `{}`", path.display()))
}

pub fn validate_rules(path: &Path) -> CliResult {
    let rb = read_rules(path)?;
    print_summary(&rb);
    let violations = rulebase::validate(&rb);
    for v in &violations {
        say!("violation: {v}");
    }
    if violations.is_empty() {
        say!("ok: {} rules satisfy all invariants", rb.rules().len());
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "{} invariant violation(s) in `{}`",
            violations.len(),
            path.display()
        )))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write `{}`", path.display()))
}
