fn main() {
    std::process::exit(mmfusion::cli::run(std::env::args_os()));
}
