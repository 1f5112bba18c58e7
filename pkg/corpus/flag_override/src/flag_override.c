#include <stdio.h>
#include <stdlib.h>
#include <string.h>

/* Format: bytes 0-3 magic "FO01", byte 4 slot index into an 8-byte scratch. */

int poke(unsigned char *buf, unsigned idx) {
    buf[idx] = 0x5a;
    return (int)idx;
}

int run(const unsigned char *data, unsigned size) {
    if (size < 5 || memcmp(data, "FO01", 4) != 0) {
        fprintf(stderr, "bad magic\n");
        return 1;
    }
    unsigned idx = data[4];
    if (idx == 0xff) {
        fprintf(stderr, "reserved slot\n");
        return 1;
    }
    unsigned char *scratch = malloc(8);
    if (!scratch)
        return 1;
    int r = poke(scratch, idx);
    free(scratch);
    printf("poked slot %d\n", r);
    return 0;
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
    return run(data, (unsigned)n);
}
