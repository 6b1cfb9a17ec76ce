fn main() {
    std::process::exit(kinemetric::cli::run(std::env::args_os()));
}
