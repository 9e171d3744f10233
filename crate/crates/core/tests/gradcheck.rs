use cool_core::oracle::format_table;
use cool_core::verify::gradcheck_suite;

#[test]
fn every_layer_passes_gradcheck() {
    for seed in [7, 11] {
        let reports = gradcheck_suite(seed).unwrap();
        print!("{}", format_table(&reports));
        let failed: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:?}");
    }
}
