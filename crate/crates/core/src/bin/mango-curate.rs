fn main() {
    std::process::exit(mango_curate::cli::run(std::env::args_os()));
}
