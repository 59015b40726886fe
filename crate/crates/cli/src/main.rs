use std::process::ExitCode;

use clap::Parser;
use repeater_cli::args::{Cli, Command, OracleArgs, SpecArgs};
use repeater_cli::{exit, oracle_suite_with, run_experiment, Mode, OracleOptions};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::CONFIG
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match cli.command {
        Command::Run(a) => simulate(&a, Mode::Run),
        Command::Sweep(a) => simulate(&a, Mode::Sweep),
        Command::Oracle(a) => oracle(&a),
    };
    ExitCode::from(code as u8)
}

fn simulate(args: &SpecArgs, mode: Mode) -> i32 {
    let spec = match args.to_spec(mode) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return exit::CONFIG;
        }
    };
    match run_experiment(&spec) {
        Ok(report) => {
            for row in report.rows() {
                println!(
                    "{:<12} M={:<3} reps={:<3} latency={} throughput/slot={} transfer={} completed={} in_flight={}",
                    row.protocol,
                    row.m_per_node,
                    row.replications,
                    show(row.latency_slots_mean),
                    show(row.throughput_per_slot),
                    show(row.mean_transfer_slots),
                    row.completed_count,
                    row.in_flight_count,
                );
            }
            for p in &report.sweep {
                println!(
                    "{:<12} M={:<3} normalized transfer={:.4}",
                    p.protocol, p.m_per_node, p.normalized_transfer
                );
            }
            println!(
                "wrote {} files to {}",
                report.files.len(),
                spec.output_dir.display()
            );
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::RUNTIME
        }
    }
}

fn show(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn oracle(args: &OracleArgs) -> i32 {
    let opts = OracleOptions {
        payloads: args.payloads,
        seed: args.seed,
        ..Default::default()
    };
    let report = match oracle_suite_with(&opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::RUNTIME;
        }
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(dir) = &args.out {
        let path = dir.join("oracle.json");
        if let Err(e) =
            std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, format!("{text}\n")))
        {
            eprintln!("cannot write {}: {e}", path.display());
            return exit::RUNTIME;
        }
    }
    if report.passed {
        exit::OK
    } else {
        for f in &report.failures {
            eprintln!("FAIL {f}");
        }
        exit::ORACLE
    }
}
