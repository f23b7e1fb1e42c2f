fn main() {
    std::process::exit(aligntune::cli::run(std::env::args_os()));
}
