fn main() {
    std::process::exit(hypercqa::cli::run(std::env::args_os()));
}
