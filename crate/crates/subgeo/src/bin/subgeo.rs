fn main() {
    std::process::exit(subgeo::cli::main_with_args(std::env::args_os()));
}
