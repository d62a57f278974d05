use std::process::ExitCode;

use clap::Parser;
use drmx_cli::commands::{self, gain_line, Cli, CliError, Command};

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Enhance(args) => {
            let report = commands::enhance(&args)?;
            println!(
                "latency: {:.1} ms ({} samples at {} Hz)",
                report.latency_ms, report.latency_samples, report.sample_rate
            );
            println!("{}", gain_line("alpha", args.alpha_db));
            println!("{}", gain_line("lambda", args.lambda_db));
            if let Some(db) = report.si_snr_improvement_db {
                println!("SI-SNR improvement: {db:.2} dB");
            }
            println!("wrote {}", args.output.display());
        }
        Command::Train(args) => {
            let report = commands::train(&args, false, &mut commands::print_epoch)?;
            println!(
                "stopped after {} epochs, best validation loss {:.4}",
                report.epochs, report.best_val_loss
            );
            if let Some(db) = report.si_snr_improvement_db {
                println!("validation SI-SNR improvement: {db:.2} dB");
            }
            println!("wrote {}", args.out.display());
        }
        Command::TrainVad(args) => {
            let report = commands::train(&args, true, &mut commands::print_epoch)?;
            println!(
                "stopped after {} epochs, best validation loss {:.4}",
                report.epochs, report.best_val_loss
            );
            println!("wrote {}", args.out.display());
        }
        Command::Stimuli(args) => {
            let items = commands::stimuli(&args)?;
            for item in &items {
                let names: Vec<&str> = item.conditions.iter().map(|c| c.name()).collect();
                println!("{}: {}", item.item_id, names.join(", "));
            }
            println!("wrote {} items to {}", items.len(), args.out.display());
        }
        Command::Stats(args) => {
            let report = commands::stats(&args)?;
            println!("condition,n,median,iqr");
            for c in &report.conditions {
                println!("{},{},{:.2},{:.2}", c.condition, c.n, c.median, c.iqr);
            }
            println!();
            print!("{}", report.table_csv);
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            rt.block_on(commands::serve(&args))?;
        }
        Command::InitWeights(args) => {
            let shape = commands::init_weights(&args)?;
            println!("{shape:?}: {} parameters", shape.param_count());
        }
        Command::InspectWeights { path } => {
            let (shape, params) = commands::inspect_weights(&path)?;
            println!(
                "input {}  hidden {}  layers {}  output {}",
                shape.input, shape.hidden, shape.layers, shape.output
            );
            println!("{params} parameters");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
