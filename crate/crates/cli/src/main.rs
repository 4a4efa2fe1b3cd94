use clap::Parser;

fn main() -> anyhow::Result<()> {
    artmix_cli::run(artmix_cli::Cli::parse())
}
