#![no_main]

use escore::data::{parse_points_csv, write_points_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_points_csv(text) {
        // Whatever parses must survive a write/parse round trip unchanged.
        let extra: Vec<(&str, &[f64])> = table.extra.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        let again = parse_points_csv(&write_points_csv(&table.points, &extra)).expect("re-parse");
        assert_eq!(again.points.shape(), table.points.shape());
        for (a, b) in again.points.data().iter().zip(table.points.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
});
