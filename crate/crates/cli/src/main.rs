fn main() {
    println!("stts");
}
