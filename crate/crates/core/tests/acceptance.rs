//! Acceptance suite: prints one line per criterion, fails if any criterion fails.

use voxmt_core::selftest::run_all;

#[test]
fn acceptance() {
    let outcomes = run_all();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
