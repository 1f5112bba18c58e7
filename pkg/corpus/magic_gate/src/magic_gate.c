#include <stdio.h>
#include <stdlib.h>
#include <string.h>

/* Record file format:
 *   bytes 0-3   magic "MGK1"
 *   byte  4     record count (>= 1)
 *   per record:
 *     2 bytes   payload length, little endian
 *     2 bytes   allocation hint, little endian
 *     N bytes   payload (payload-length bytes)
 */

static unsigned read_le16(const unsigned char *p) {
    return (unsigned)p[0] | ((unsigned)p[1] << 8);
}

int copy_payload(unsigned char *dst, const unsigned char *src, unsigned len) {
    memcpy(dst, src, len);
    return (int)len;
}

int load_record(const unsigned char *data, unsigned avail) {
    if (avail < 4)
        return -1;
    unsigned len = read_le16(data);
    unsigned hint = read_le16(data + 2);
    if (avail < 4 + len)
        return -1;
    unsigned char *buf = malloc(hint ? hint : 1);
    if (!buf)
        return -1;
    int used = copy_payload(buf, data + 4, len);
    free(buf);
    return 4 + used;
}

int parse_file(const unsigned char *data, unsigned size) {
    if (size < 5 || memcmp(data, "MGK1", 4) != 0) {
        fprintf(stderr, "bad magic\n");
        return 1;
    }
    unsigned count = data[4];
    if (count == 0) {
        fprintf(stderr, "no records\n");
        return 1;
    }
    unsigned off = 5;
    for (unsigned i = 0; i < count; i++) {
        int used = load_record(data + off, size - off);
        if (used < 0) {
            fprintf(stderr, "truncated record %u\n", i);
            return 1;
        }
        off += (unsigned)used;
    }
    printf("parsed %u record(s)\n", count);
    return 0;
}

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s <record-file>\n", argv[0]);
        return 2;
    }
    FILE *f = fopen(argv[1], "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    unsigned char data[65536];
    size_t n = fread(data, 1, sizeof(data), f);
    fclose(f);
    return parse_file(data, (unsigned)n);
}
