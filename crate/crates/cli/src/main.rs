use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use phi4ml_cli::{parse_config, run, Verb};

/// phi^4 lattice field theory as a trainable Markov random field.
#[derive(Parser, Debug)]
#[command(name = "phi4ml", version, after_help = verbs_help())]
struct Args {
    /// One of the verbs listed below.
    verb: String,
    /// Configuration file with `key = value` lines and `[verb]` sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Print the keys the verb accepts, with defaults, and exit.
    #[arg(long)]
    keys: bool,
    /// Overrides of the form KEY=VALUE.
    overrides: Vec<String>,
}

fn verbs_help() -> String {
    format!("Verbs: {}", Verb::ALL.map(Verb::name).join(", "))
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.keys {
        return match Verb::parse(&args.verb) {
            Ok(v) => {
                for k in v.keys() {
                    println!("{:<18} {:<28} {}", k.name, format!("[{}]", k.default), k.help);
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        };
    }
    let result = parse_config(&args.verb, args.config.as_deref(), &args.overrides).and_then(|c| run(&c));
    match result {
        Ok(artifacts) => {
            for f in artifacts.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("phi4ml {}: {e}", args.verb);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
