#include <stdio.h>
#include <stdlib.h>
#include <string.h>

/* Format: bytes 0-3 magic "WR01", byte 4 selector into a fixed mode table. */

static int mode_table[4] = {2, 3, 5, 7};

int table_get(unsigned idx) {
    return mode_table[idx];
}

int select_mode(const unsigned char *data, unsigned size) {
    if (size < 5 || memcmp(data, "WR01", 4) != 0) {
        fprintf(stderr, "bad magic\n");
        return -1;
    }
    unsigned idx = data[4];
    if (idx == 0xff) {
        fprintf(stderr, "reserved selector\n");
        return -1;
    }
    return table_get(idx);
}

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s <file>\n", argv[0]);
        return 2;
    }
    FILE *f = fopen(argv[1], "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    unsigned char data[256];
    size_t n = fread(data, 1, sizeof(data), f);
    fclose(f);
    int mode = select_mode(data, (unsigned)n);
    if (mode < 0)
        return 1;
    printf("mode %d\n", mode);
    return 0;
}
