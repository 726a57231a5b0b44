fn main() {
    std::process::exit(thz_umi::cli::run_from(std::env::args_os()));
}
