//! Fills an accuracy ledger by hand and derives FAA, CAA and FFM.
use prol::evaluator::MetricsLedger;

fn main() -> prol::Result<()> {
    // column t holds accuracy on tasks 1..=t after learning task t
    let ledger = MetricsLedger::from_columns(&[vec![95.0], vec![88.0, 91.0], vec![80.0, 85.0, 93.0]])?;
    let m = ledger.metrics()?;
    println!("AA curve {:?}", m.aa);
    println!("FAA {:.2}  CAA {:.2}  FFM {:.2}", m.faa, m.caa, m.ffm.unwrap_or(f64::NAN));
    print!("{}", ledger.to_csv());
    println!("{}", m.to_json());
    Ok(())
}
