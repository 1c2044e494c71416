fn main() {
    std::process::exit(groupclip_harness::cli::run_cli(std::env::args_os()));
}
