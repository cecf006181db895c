fn main() {
    std::process::exit(lqf_cli::run(std::env::args_os()));
}
