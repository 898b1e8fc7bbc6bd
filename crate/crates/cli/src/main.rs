fn main() {
    std::process::exit(latent_update_cli::run_cli(std::env::args_os()));
}
