//! Cohort CSV reader and writer.
//!
//! One header row, then one patient per row, columns in [`COLUMNS`] order.
//! Booleans are `0`/`1`; `hpv` is `0` negative, `1` positive, `2` unknown;
//! `subsite` is one of `BOT`, `tonsil`, `GPS`, `soft_palate`,
//! `pharyngeal_wall`, `NOS`; `pr_*`/`nr_*` are response levels 0..3
//! (progressive, stable, partial, complete); `dlt{1,2}_k` follow
//! [`DLT_NAMES`] order for the post-IC and post-CC stages.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::types::*;
use crate::error::{Error, FieldError, Result};

pub const COLUMNS: [&str; 56] = [
    "age",
    "male",
    "race_black",
    "race_hispanic",
    "race_other",
    "hpv",
    "smoking",
    "pack_years",
    "ln_01",
    "ln_02",
    "ln_03",
    "ln_04",
    "ln_05",
    "ln_06",
    "ln_07",
    "ln_08",
    "ln_09",
    "ln_10",
    "ln_11",
    "ln_12",
    "ln_13",
    "ln_14",
    "t_stage",
    "n_stage",
    "ajcc",
    "grade",
    "subsite",
    "bilateral",
    "total_dose",
    "dose_fraction",
    "asp_pre",
    "ic",
    "cc",
    "nd",
    "pr_ic",
    "nr_ic",
    "dlt1_1",
    "dlt1_2",
    "dlt1_3",
    "dlt1_4",
    "dlt1_5",
    "pr_cc",
    "nr_cc",
    "dlt2_1",
    "dlt2_2",
    "dlt2_3",
    "dlt2_4",
    "dlt2_5",
    "os_event",
    "os_months",
    "lrc_event",
    "lrc_months",
    "fdm_event",
    "fdm_months",
    "ft",
    "asp_post",
];

fn b(v: bool) -> String {
    (v as u8).to_string()
}

fn record_fields(r: &CohortRecord) -> Vec<String> {
    let p = &r.features;
    let mut f = vec![
        p.age.to_string(),
        b(p.is_male),
        b(p.race == Race::Black),
        b(p.race == Race::Hispanic),
        b(p.race == Race::Other),
        p.hpv.code().to_string(),
        p.smoking_status.to_string(),
        p.pack_years.to_string(),
    ];
    f.extend(p.lymph_node_regions.iter().map(|&v| b(v)));
    f.extend([
        p.t_stage.to_string(),
        p.n_stage.to_string(),
        p.ajcc_stage.to_string(),
        p.pathological_grade.to_string(),
        p.subsite.code().to_string(),
        b(p.bilateral),
        p.total_dose.to_string(),
        p.dose_fraction.to_string(),
        b(p.aspiration_pre),
        b(r.sequence.ic),
        b(r.sequence.cc),
        b(r.sequence.nd),
    ]);
    for t in [&r.after_ic, &r.after_cc] {
        f.push(t.primary_response.to_string());
        f.push(t.nodal_response.to_string());
        f.extend(t.dlt.iter().map(|&v| b(v)));
    }
    for e in &r.outcome.endpoints {
        f.push(b(e.event));
        f.push(e.months.to_string());
    }
    f.push(b(r.outcome.ft));
    f.push(b(r.outcome.aspiration_post));
    f
}

pub fn write_cohort<W: Write>(out: W, records: &[CohortRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush().map_err(|e| Error::io("<cohort output>", e))?;
    Ok(())
}

pub fn save_cohort_csv(path: impl AsRef<Path>, records: &[CohortRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(std::io::BufWriter::new(file), records)
}

pub fn load_cohort_csv(path: impl AsRef<Path>) -> Result<Vec<CohortRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(std::io::BufReader::new(file))
}

/// Field accessor for one row that records problems instead of failing fast.
pub(crate) struct RowReader<'a> {
    pub row: usize,
    pub record: &'a csv::StringRecord,
    pub index: &'a HashMap<String, usize>,
    pub errors: &'a mut Vec<FieldError>,
}

impl RowReader<'_> {
    pub fn fail(&mut self, column: &str, message: String) {
        self.errors.push(FieldError {
            row: Some(self.row),
            column: column.to_string(),
            message,
        });
    }

    pub fn raw(&mut self, column: &str) -> Option<String> {
        let i = *self.index.get(column)?;
        match self.record.get(i) {
            Some(s) => Some(s.trim().to_string()),
            None => {
                self.fail(column, "missing value".into());
                None
            }
        }
    }

    pub fn float(&mut self, column: &str) -> f64 {
        match self.raw(column) {
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    self.fail(column, format!("`{s}` is not a finite number"));
                    f64::NAN
                }
            },
            None => f64::NAN,
        }
    }

    pub fn int(&mut self, column: &str) -> u8 {
        match self.raw(column) {
            Some(s) => match s.parse::<u8>() {
                Ok(v) => v,
                Err(_) => {
                    self.fail(column, format!("`{s}` is not a non-negative integer"));
                    0
                }
            },
            None => 0,
        }
    }

    pub fn flag(&mut self, column: &str) -> bool {
        match self.raw(column).as_deref() {
            Some("0") => false,
            Some("1") => true,
            Some(s) => {
                let s = s.to_string();
                self.fail(column, format!("`{s}` is not 0 or 1"));
                false
            }
            None => false,
        }
    }
}

pub(crate) fn header_index(
    headers: &csv::StringRecord,
    required: &[&str],
) -> Result<HashMap<String, usize>> {
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let missing: Vec<FieldError> = required
        .iter()
        .filter(|c| !index.contains_key(**c))
        .map(|c| FieldError {
            row: None,
            column: c.to_string(),
            message: "missing column".into(),
        })
        .collect();
    if missing.is_empty() {
        Ok(index)
    } else {
        Err(Error::Validation(missing))
    }
}

fn parse_row(rr: &mut RowReader<'_>) -> CohortRecord {
    let age = rr.float("age");
    let is_male = rr.flag("male");
    let race_flags = [
        rr.flag("race_black"),
        rr.flag("race_hispanic"),
        rr.flag("race_other"),
    ];
    let race = match race_flags {
        [false, false, false] => Race::White,
        [true, false, false] => Race::Black,
        [false, true, false] => Race::Hispanic,
        [false, false, true] => Race::Other,
        _ => {
            rr.fail("race_black", "at most one race flag may be set".into());
            Race::White
        }
    };
    let hpv_code = rr.int("hpv");
    let hpv = Hpv::from_code(hpv_code).unwrap_or_else(|| {
        rr.fail("hpv", format!("{hpv_code} is not 0, 1 or 2"));
        Hpv::Unknown
    });
    let smoking_status = rr.int("smoking");
    let pack_years = rr.float("pack_years");
    let mut lymph_node_regions = [false; LYMPH_NODE_REGIONS];
    for (i, v) in lymph_node_regions.iter_mut().enumerate() {
        *v = rr.flag(&format!("ln_{:02}", i + 1));
    }
    let t_stage = rr.int("t_stage");
    let n_stage = rr.int("n_stage");
    let ajcc_stage = rr.int("ajcc");
    let pathological_grade = rr.int("grade");
    let subsite = match rr.raw("subsite") {
        Some(s) => Subsite::from_code(&s).unwrap_or_else(|| {
            rr.fail("subsite", format!("unknown subsite `{s}`"));
            Subsite::NotOtherwiseSpecified
        }),
        None => Subsite::NotOtherwiseSpecified,
    };
    let features = PatientFeatures {
        age,
        is_male,
        race,
        hpv,
        smoking_status,
        pack_years,
        lymph_node_regions,
        t_stage,
        n_stage,
        ajcc_stage,
        pathological_grade,
        subsite,
        bilateral: rr.flag("bilateral"),
        total_dose: rr.float("total_dose"),
        dose_fraction: rr.float("dose_fraction"),
        aspiration_pre: rr.flag("asp_pre"),
    };
    let sequence = TreatmentSequence::new(rr.flag("ic"), rr.flag("cc"), rr.flag("nd"));
    let mut transition = |stage: &str, n: usize| TransitionState {
        primary_response: rr.int(&format!("pr_{stage}")),
        nodal_response: rr.int(&format!("nr_{stage}")),
        dlt: std::array::from_fn(|k| rr.flag(&format!("dlt{n}_{}", k + 1))),
    };
    let after_ic = transition("ic", 1);
    let after_cc = transition("cc", 2);
    let endpoints = ["os", "lrc", "fdm"].map(|e| EventTime {
        event: rr.flag(&format!("{e}_event")),
        months: rr.float(&format!("{e}_months")),
    });
    let outcome = OutcomeRecord {
        endpoints,
        ft: rr.flag("ft"),
        aspiration_post: rr.flag("asp_post"),
    };
    CohortRecord {
        features,
        sequence,
        after_ic,
        after_cc,
        outcome,
    }
}

/// Parse and validate every row; fails with all row-level problems if any.
pub fn read_cohort<R: Read>(input: R) -> Result<Vec<CohortRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let index = header_index(reader.headers()?, &COLUMNS)?;
    let mut errors = Vec::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let before = errors.len();
        let mut rr = RowReader {
            row: row_no,
            record: &row,
            index: &index,
            errors: &mut errors,
        };
        let rec = parse_row(&mut rr);
        // Range checks only make sense once every field parsed.
        if errors.len() == before {
            errors.extend(rec.validate().into_iter().map(|mut e| {
                e.row = Some(row_no);
                e
            }));
        }
        records.push(rec);
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Validation(errors))
    }
}
