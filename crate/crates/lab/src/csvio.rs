//! Results CSV schema, parsing, and group-by summarization.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{LabError, LabResult};

pub const HEADER: &str = "run_id,phase,epoch,dataset,trigger,alpha,lambda,strategy,poison_class,\
reg_kind,reg_weight,seed,clean_val_acc,poison_val_acc,adv_success,early_stop";

/// One epoch of one run phase, as persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run_id: String,
    pub phase: String,
    pub epoch: usize,
    pub dataset: String,
    pub trigger: String,
    pub alpha: f32,
    pub lambda: f64,
    pub strategy: String,
    pub poison_class: usize,
    pub reg_kind: String,
    pub reg_weight: f32,
    pub seed: u64,
    pub clean_val_acc: f32,
    pub poison_val_acc: f32,
    pub adv_success: f32,
    pub early_stop: usize,
}

impl Row {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.phase,
            self.epoch,
            self.dataset,
            self.trigger,
            self.alpha,
            self.lambda,
            self.strategy,
            self.poison_class,
            self.reg_kind,
            self.reg_weight,
            self.seed,
            self.clean_val_acc,
            self.poison_val_acc,
            self.adv_success,
            self.early_stop
        )
    }

    pub fn parse(line: &str, path: &Path, ln: usize) -> LabResult<Row> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            return Err(LabError::format(
                path,
                format!("line {}: expected 16 fields, got {}", ln + 1, fields.len()),
            ));
        }
        let num = |i: usize| -> LabResult<f32> {
            fields[i]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad number `{}`", ln + 1, fields[i])))
        };
        Ok(Row {
            run_id: fields[0].to_string(),
            phase: fields[1].to_string(),
            epoch: fields[2]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad epoch", ln + 1)))?,
            dataset: fields[3].to_string(),
            trigger: fields[4].to_string(),
            alpha: num(5)?,
            lambda: fields[6]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad lambda", ln + 1)))?,
            strategy: fields[7].to_string(),
            poison_class: fields[8]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad poison_class", ln + 1)))?,
            reg_kind: fields[9].to_string(),
            reg_weight: num(10)?,
            seed: fields[11]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad seed", ln + 1)))?,
            clean_val_acc: num(12)?,
            poison_val_acc: num(13)?,
            adv_success: num(14)?,
            early_stop: fields[15]
                .parse()
                .map_err(|_| LabError::format(path, format!("line {}: bad early_stop", ln + 1)))?,
        })
    }
}

pub fn read_rows(path: &Path) -> LabResult<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((_, h)) => {
            return Err(LabError::format(path, format!("unexpected header `{h}`")));
        }
        None => return Err(LabError::format(path, "empty file")),
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(Row::parse(line, path, ln)?);
    }
    if rows.is_empty() {
        return Err(LabError::format(path, "no result rows"));
    }
    Ok(rows)
}

/// Aggregate over runs of one factor combination and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub trigger: String,
    pub alpha: f32,
    pub lambda: f64,
    pub strategy: String,
    pub poison_class: usize,
    pub reg_kind: String,
    pub reg_weight: f32,
    pub phase: String,
    pub runs: usize,
    pub mean_clean_val_acc: f64,
    pub mean_poison_val_acc: f64,
    pub mean_adv_success: f64,
}

pub const SUMMARY_HEADER: &str = "dataset,trigger,alpha,lambda,strategy,poison_class,reg_kind,\
reg_weight,phase,runs,mean_clean_val_acc,mean_poison_val_acc,mean_adv_success";

impl SummaryRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.trigger,
            self.alpha,
            self.lambda,
            self.strategy,
            self.poison_class,
            self.reg_kind,
            self.reg_weight,
            self.phase,
            self.runs,
            self.mean_clean_val_acc,
            self.mean_poison_val_acc,
            self.mean_adv_success
        )
    }
}

/// Final-epoch metrics of every (run, phase), averaged per factor
/// combination. Output order is the sorted group key.
pub fn summarize(rows: &[Row]) -> LabResult<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(LabError::Runtime("no rows to summarize".into()));
    }
    // Last epoch per (run_id, phase).
    let mut finals: BTreeMap<(String, String), &Row> = BTreeMap::new();
    for row in rows {
        let key = (row.run_id.clone(), row.phase.clone());
        let keep = match finals.get(&key) {
            Some(existing) => row.epoch > existing.epoch,
            None => true,
        };
        if keep {
            finals.insert(key, row);
        }
    }
    // Group by factor combination + phase.
    let mut groups: BTreeMap<String, (Vec<&Row>, &Row)> = BTreeMap::new();
    for row in finals.values() {
        let key = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}",
            row.dataset,
            row.trigger,
            row.alpha,
            row.lambda,
            row.strategy,
            row.poison_class,
            row.reg_kind,
            row.reg_weight,
            row.phase
        );
        groups.entry(key).or_insert_with(|| (Vec::new(), row)).0.push(row);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (_, (members, sample)) in groups {
        let n = members.len() as f64;
        out.push(SummaryRow {
            dataset: sample.dataset.clone(),
            trigger: sample.trigger.clone(),
            alpha: sample.alpha,
            lambda: sample.lambda,
            strategy: sample.strategy.clone(),
            poison_class: sample.poison_class,
            reg_kind: sample.reg_kind.clone(),
            reg_weight: sample.reg_weight,
            phase: sample.phase.clone(),
            runs: members.len(),
            mean_clean_val_acc: members.iter().map(|r| r.clean_val_acc as f64).sum::<f64>() / n,
            mean_poison_val_acc: members.iter().map(|r| r.poison_val_acc as f64).sum::<f64>() / n,
            mean_adv_success: members.iter().map(|r| r.adv_success as f64).sum::<f64>() / n,
        });
    }
    Ok(out)
}

/// Plain-text table with aligned columns.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let headers = ["trigger", "alpha", "lambda", "strategy", "t", "reg", "w", "phase", "runs",
        "clean_acc", "poison_acc", "adv_success"];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.trigger.clone(),
            format!("{}", r.alpha),
            format!("{}", r.lambda),
            r.strategy.clone(),
            format!("{}", r.poison_class),
            r.reg_kind.clone(),
            format!("{}", r.reg_weight),
            r.phase.clone(),
            format!("{}", r.runs),
            format!("{:.4}", r.mean_clean_val_acc),
            format!("{:.4}", r.mean_poison_val_acc),
            format!("{:.4}", r.mean_adv_success),
        ]);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        for (c, cell) in row.iter().enumerate() {
            out.push_str(&format!("{:<width$}  ", cell, width = widths[c]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, phase: &str, epoch: usize, adv: f32, clean: f32) -> Row {
        Row {
            run_id: run.into(),
            phase: phase.into(),
            epoch,
            dataset: "synthetic".into(),
            trigger: "square".into(),
            alpha: 1.0,
            lambda: 0.1,
            strategy: "many_to_one".into(),
            poison_class: 0,
            reg_kind: "none".into(),
            reg_weight: 1.0,
            seed: 1,
            clean_val_acc: clean,
            poison_val_acc: clean,
            adv_success: adv,
            early_stop: 2,
        }
    }

    #[test]
    fn line_roundtrip() {
        let r = row("abc", "base", 3, 0.725, 0.9);
        let line = r.to_line();
        assert_eq!(line.split(',').count(), 16);
        let back = Row::parse(&line, Path::new("mem"), 1).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn single_run_summary_is_its_final_epoch() {
        let rows = vec![row("a", "base", 1, 0.1, 0.5), row("a", "base", 2, 0.9, 0.8)];
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 1);
        assert!((s[0].mean_adv_success - 0.9).abs() < 1e-6);
    }

    #[test]
    fn two_runs_average() {
        let rows = vec![row("a", "base", 5, 0.2, 0.8), row("b", "base", 4, 0.4, 0.6)];
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].runs, 2);
        assert!((s[0].mean_adv_success - 0.3).abs() < 1e-6);
        assert!((s[0].mean_clean_val_acc - 0.7).abs() < 1e-6);
    }

    #[test]
    fn spreadsheet_fixture_means() {
        // 20-row fixture: two combos x two runs x five epochs; expected
        // means recomputed by hand on the final epochs.
        let mut rows = Vec::new();
        for (run, trig, base_adv) in
            [("r1", "square", 0.60), ("r2", "square", 0.70), ("r3", "sine", 0.20), ("r4", "sine", 0.40)]
        {
            for epoch in 1..=5 {
                let mut r = row(run, "base", epoch, base_adv - 0.01 * (5 - epoch) as f32, 0.9);
                r.trigger = trig.into();
                rows.push(r);
            }
        }
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 2);
        let sine = s.iter().find(|x| x.trigger == "sine").unwrap();
        let square = s.iter().find(|x| x.trigger == "square").unwrap();
        assert!((sine.mean_adv_success - 0.30).abs() < 1e-6);
        assert!((square.mean_adv_success - 0.65).abs() < 1e-6);
    }

    #[test]
    fn summarize_rejects_empty() {
        assert!(summarize(&[]).is_err());
    }
}
