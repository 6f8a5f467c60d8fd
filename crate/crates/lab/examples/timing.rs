use stp_lab::{train_run, TrainConfig};

fn main() {
    let mut cfg = TrainConfig::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.epochs = e.parse().unwrap();
    }
    if let Some(l) = std::env::args().nth(2) {
        cfg.aux.lambda = l.parse().unwrap();
    }
    let run = train_run(&cfg).unwrap();
    let r = &run.record;
    println!("steps {} wall {:?}", r.rows.len(), r.wall_time);
    println!("first {:?}\nlast {:?}", r.rows[0], r.rows.last().unwrap());
    println!("acc {:?} final_ntp {} final_stp {}", r.eval, r.final_ntp, r.final_stp);
}
