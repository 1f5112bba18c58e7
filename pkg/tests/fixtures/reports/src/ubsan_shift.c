int shift_by(int x, int amount) {
    return x << amount;
}

int scale(int x) {
    return shift_by(x, 40);
}

int main(void) {
    return scale(3) & 1;
}
