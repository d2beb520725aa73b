fn main() {
    std::process::exit(lms::usermetric::cli::run(std::env::args_os()));
}
