fn main() {
    // CLI wiring lands with the io module.
}
