fn main() {
    std::process::exit(ovprobe::cli::run_subcommand(std::env::args_os()));
}
