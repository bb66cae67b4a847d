use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{json_error_offset, read_file, write_file, IoError};
use crate::audit::{DeptMetrics, DtaReport};

pub const REPORT_HEADER: &str =
    "dept,mape_pct,median_ape_pct,mean_ratio,mean_aipe_pct,k,k_hat,c_kwp,c_hat_kwp,filtered";

/// JSON summary: one report per filtering variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub reports: Vec<DtaReport>,
}

fn push_row(out: &mut String, dept: &str, m: &DeptMetrics, filtered: bool) {
    let aipe = m.mean_aipe_pct.map(|a| a.to_string()).unwrap_or_default();
    let _ = writeln!(
        out,
        "{dept},{},{},{},{aipe},{},{},{},{},{filtered}",
        m.mape_pct, m.median_ape_pct, m.mean_ratio, m.k, m.k_hat, m.c_kwp, m.c_hat_kwp
    );
}

/// Table rows per département (sorted) then `overall`; within a département
/// each variant follows in the order given, so a filtered report followed by
/// an unfiltered one yields the with/(without) pairing.
pub fn report_csv(reports: &[DtaReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let depts: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.per_dept.keys().map(String::as_str))
        .collect();
    for dept in depts {
        for r in reports {
            if let Some(m) = r.per_dept.get(dept) {
                push_row(&mut out, dept, m, r.filtered);
            }
        }
    }
    for r in reports {
        if let Some(m) = &r.overall {
            push_row(&mut out, "overall", m, r.filtered);
        }
    }
    out
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize infallibly");
    bytes.push(b'\n');
    bytes
}

pub fn write_report(
    reports: &[DtaReport],
    csv_path: &Path,
    json_path: &Path,
) -> Result<(), IoError> {
    write_file(csv_path, report_csv(reports).as_bytes())?;
    let summary = ReportSummary {
        reports: reports.to_vec(),
    };
    write_file(json_path, &to_json_bytes(&summary))
}

pub fn read_report_summary(path: &Path) -> Result<ReportSummary, IoError> {
    read_json(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_file(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Parse {
        context: path.display().to_string(),
        offset: json_error_offset(&bytes, &e),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{build_report, compare_city, CityComparison};

    fn test_row_report() -> DtaReport {
        let m = compare_city(1485, 6473.8, 1362, 5334.02).unwrap();
        let c = CityComparison {
            city_code: "test".into(),
            dept_code: "test".into(),
            k: 1485,
            k_hat: 1362,
            c_kwp: 6473.8,
            c_hat_kwp: 5334.02,
            ape: m.ape,
            ratio: m.ratio,
            aipe: m.aipe,
        };
        build_report(vec![c], vec![], true).unwrap()
    }

    #[test]
    fn test_row_csv_after_display_rounding() {
        let csv = report_csv(&[test_row_report()]);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        let r2 = |s: &str| format!("{:.2}", s.parse::<f64>().unwrap());
        assert_eq!(row[0], "test");
        assert_eq!(r2(row[1]), "17.61");
        assert_eq!(r2(row[3]), "0.92");
        assert_eq!(&row[5..], ["1485", "1362", "6473.8", "5334.02", "true"]);
        assert_eq!(
            csv.lines().last().unwrap().split(',').next(),
            Some("overall")
        );
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        write_report(&[DtaReport::empty(true)], &csv, &json).unwrap();
        assert_eq!(
            std::fs::read_to_string(&csv).unwrap(),
            format!("{REPORT_HEADER}\n")
        );
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
        assert_eq!(v["reports"][0]["cities"], serde_json::json!([]));
    }

    #[test]
    fn json_summary_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        let mut unfiltered = test_row_report();
        unfiltered.filtered = false;
        unfiltered.unassigned_capacity_kwp = 0.1 + 0.2;
        let reports = vec![test_row_report(), unfiltered];
        write_report(&reports, &csv, &json).unwrap();
        let back = read_report_summary(&json).unwrap();
        assert_eq!(back.reports, reports);
        let text = std::fs::read_to_string(&csv).unwrap();
        let flags: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap())
            .collect();
        assert_eq!(flags, ["true", "false", "true", "false"]);
    }
}
