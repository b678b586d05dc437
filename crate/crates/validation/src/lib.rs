//! Holds the `acceptance` test target, which replays the simulator's
//! headline experiments and prints one PASS/FAIL line per criterion.
//! Run it with `cargo test -p tlp-validation --test acceptance`.
