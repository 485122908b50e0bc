use std::path::{Path, PathBuf};

use tmmp::hierarchy::Groupings;
use tmmp::io::{read_data_table, read_groupings};
use tmmp::spec::{compare_specs, compile_spec, emit_spec, parse_spec, validate_spec, ModelSpec, Severity, SpecData};

const FIXTURES: [&str; 6] = ["gbd", "b3", "fpem", "nmr", "bmat", "subnational"];

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn load(name: &str) -> ModelSpec {
    let text = std::fs::read_to_string(fixture_dir().join(format!("{name}.tmmp"))).unwrap();
    parse_spec(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn data_for(name: &str) -> SpecData {
    let dir = fixture_dir();
    let table = |f: &str| {
        let p = dir.join(f);
        p.exists().then(|| read_data_table(&p).unwrap())
    };
    let groupings: Option<Groupings> = {
        let p = dir.join(format!("{name}_groupings.csv"));
        p.exists().then(|| read_groupings(&p).unwrap())
    };
    SpecData {
        covariates: table(&format!("{name}_covariates.csv")),
        offsets: table(&format!("{name}_offsets.csv")),
        groupings,
    }
}

#[test]
fn fixtures_parse_validate_and_round_trip() {
    for name in FIXTURES {
        let spec = load(name);
        let findings = validate_spec(&spec);
        assert!(findings.is_empty(), "{name}: {findings:?}");
        let again = parse_spec(&emit_spec(&spec)).unwrap();
        assert_eq!(again, spec, "{name}");
        assert_eq!(emit_spec(&again), emit_spec(&spec), "{name}");
    }
}

#[test]
fn fixtures_compile_with_their_tables() {
    for name in FIXTURES {
        let spec = load(name);
        let compiled = compile_spec(&spec, data_for(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(compiled.model.grid.n_populations(), 4);
        assert_eq!(compiled.model.grid.n_times(), 31);
    }
}

#[test]
fn compile_fails_without_required_tables() {
    let spec = load("gbd");
    assert!(compile_spec(&spec, SpecData::default()).is_err());
    let spec = load("fpem");
    let mut data = data_for("fpem");
    data.groupings = None;
    assert!(compile_spec(&spec, data).is_err());
}

#[test]
fn gbd_b3_structural_rows() {
    let t = compare_specs(&[("GBD".into(), load("gbd")), ("B3".into(), load("b3"))]);
    let cells = |l: &str| t.row(l).unwrap().cells.clone();
    assert_eq!(cells("r"), ["0", "2"]);
    assert_eq!(cells("s"), ["Matérn", "independent"]);
    let b = cells("B");
    assert_eq!(b[0], "identity");
    assert!(b[1].starts_with("cubic B-splines"));
    assert_eq!(cells("g1"), ["log10", "log"]);
}

#[test]
fn fpem_hierarchy_rows() {
    let t = compare_specs(&[("FPEM".into(), load("fpem"))]);
    let levels = &t.row("Levels").unwrap().cells[0];
    assert!(levels.contains("omega_c: 3"), "{levels}");
    let groupings = &t.row("Groupings").unwrap().cells[0];
    assert!(groupings.contains("omega_c: countries within sub-region, region, world"));
}

#[test]
fn comparison_is_permutation_equivariant() {
    let specs: Vec<(String, ModelSpec)> = FIXTURES.iter().map(|n| (n.to_string(), load(n))).collect();
    let forward = compare_specs(&specs);
    let mut reversed = specs.clone();
    reversed.reverse();
    let backward = compare_specs(&reversed);
    for (a, b) in forward.rows.iter().zip(&backward.rows) {
        assert_eq!(a.label, b.label);
        let mut rev = b.cells.clone();
        rev.reverse();
        assert_eq!(a.cells, rev);
    }
}

#[test]
fn text_and_csv_render_the_same_cells() {
    let t = compare_specs(&[("GBD".into(), load("gbd")), ("B3".into(), load("b3"))]);
    let text = t.to_text();
    let csv_text = t.to_csv();
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    for rec in r.records() {
        let rec = rec.unwrap();
        for cell in rec.iter() {
            assert!(text.contains(cell), "{cell}");
        }
    }
}

#[test]
fn double_housing_is_reported() {
    let text = std::fs::read_to_string(fixture_dir().join("b3.tmmp"))
        .unwrap()
        .replace("omega2_survey = half_normal(scale=0.5)", "omega2_survey = half_normal(scale=0.5)\nsigma2_c = fixed(0.1)");
    let spec = parse_spec(&text).unwrap();
    let errors: Vec<_> = validate_spec(&spec).into_iter().filter(|f| f.severity == Severity::Error).collect();
    assert_eq!(errors.len(), 1);
    assert!(errors[0].message.contains("double housing"), "{}", errors[0]);
    assert!(compile_spec(&spec, SpecData::default()).is_err());
}

#[test]
fn missing_constraints_for_nonstationary_smoother() {
    let text = std::fs::read_to_string(fixture_dir().join("nmr.tmmp"))
        .unwrap()
        .replace("K = [sum_range(1, K)]", "K = ·");
    let findings = validate_spec(&parse_spec(&text).unwrap());
    assert!(findings
        .iter()
        .any(|f| f.severity == Severity::Error && f.message.contains("non-stationary smoother")));
}

#[test]
fn pooled_projection_needs_second_order_smoother() {
    let text = std::fs::read_to_string(fixture_dir().join("nmr.tmmp"))
        .unwrap()
        .replace("[Projections]\n·", "[Projections]\nprojection = pooled(W=0.3)");
    let findings = validate_spec(&parse_spec(&text).unwrap());
    assert!(findings.iter().any(|f| f.message.contains("r = 2")));
}

#[test]
fn warnings_are_not_errors() {
    let text = std::fs::read_to_string(fixture_dir().join("nmr.tmmp"))
        .unwrap()
        .replace("beta_2 = vague(lo=0.005, hi=0.5)", "beta_2 = vague");
    let spec = parse_spec(&text).unwrap();
    let findings = validate_spec(&spec);
    assert!(!findings.is_empty());
    assert!(findings.iter().all(|f| f.severity == Severity::Warning));
    assert!(compile_spec(&spec, data_for("nmr")).is_ok());
}

#[test]
fn bmat_accepts_truncated_normal_hierarchy_encoding() {
    let text = std::fs::read_to_string(fixture_dir().join("bmat.tmmp")).unwrap().replace(
        "kappa2_c = multiplicative_tn(lo=-1, hi=2, scale=variance)",
        "kappa2_c = hierarchical(pi=truncated_normal(lo=0, hi=5), levels=1, groupings=\"countries within world\")",
    );
    let spec = parse_spec(&text).unwrap();
    assert!(validate_spec(&spec).is_empty());
    assert_eq!(parse_spec(&emit_spec(&spec)).unwrap(), spec);
}

#[test]
fn truncated_file_reports_a_line() {
    let text = std::fs::read_to_string(fixture_dir().join("b3.tmmp")).unwrap();
    let cut = &text[..text.find("[Offsets]").unwrap()];
    match parse_spec(cut) {
        Err(tmmp::TmmpError::Parse(errors)) => {
            assert!(errors.iter().any(|e| e.message == "missing section: Offsets"));
            assert!(errors.iter().all(|e| e.line >= 1));
        }
        other => panic!("{other:?}"),
    }
}
