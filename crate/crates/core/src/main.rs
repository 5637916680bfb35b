use clap::Parser;

use minimax_spp::cli::{self, Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    let code = match &args.command {
        Command::Regress(common) => cli::run_regress(common),
        Command::Netflow(common) => cli::run_netflow(common),
        Command::Rate(common) => cli::run_rate(common),
        Command::Proptest(common) => cli::run_proptest(common),
    };
    std::process::exit(code);
}
