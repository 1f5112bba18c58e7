static int table[4] = {1, 2, 3, 4};

int read_table(int i) {
    return table[i];
}

int select_entry(int i) {
    return read_table(i);
}

int main(void) {
    return select_entry(6);
}
