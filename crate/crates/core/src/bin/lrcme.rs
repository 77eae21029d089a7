fn main() {
    std::process::exit(lowrank_cme::cli::main_with_args(std::env::args_os()));
}
