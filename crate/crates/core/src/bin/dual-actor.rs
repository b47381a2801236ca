fn main() {
    std::process::exit(dual_actor_rl::cli::main_with_args(std::env::args_os()));
}
