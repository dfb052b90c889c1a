fn main() {
    std::process::exit(cpzoo::cli::run(std::env::args_os()));
}
