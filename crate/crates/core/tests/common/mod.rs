#![allow(dead_code)]

use crop_core::metrics::UserComparison;

/// `(available, unseen)` accuracy pair.
pub type Pair = (f64, f64);

/// Per-user accuracies (percent) of the three personalized WiFi-gesture
/// users, scenario 1: `(user, generic, conventional, crop)`, each as
/// `(available, unseen)`.
pub const WIDAR_S1: [(&str, Pair, Pair, Pair); 3] = [
    ("0", (63.90, 77.09), (87.06, 65.02), (83.67, 69.53)),
    ("1", (61.80, 79.78), (89.38, 44.38), (86.41, 54.45)),
    ("2", (45.63, 79.81), (75.39, 53.19), (77.02, 62.63)),
];

fn pair(v: (f64, f64)) -> [(String, f64); 2] {
    [("a".to_string(), v.0 / 100.0), ("u".to_string(), v.1 / 100.0)]
}

pub fn widar_vs_generic() -> Vec<UserComparison> {
    WIDAR_S1
        .iter()
        .map(|(u, g, _, p)| UserComparison::new(*u, pair(*p), pair(*g)))
        .collect()
}

pub fn widar_vs_conventional() -> Vec<UserComparison> {
    WIDAR_S1
        .iter()
        .map(|(u, _, c, p)| UserComparison::new(*u, pair(*p), pair(*c)))
        .collect()
}
