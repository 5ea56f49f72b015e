fn main() {
    std::process::exit(eva_core::cli::run(std::env::args_os()));
}
