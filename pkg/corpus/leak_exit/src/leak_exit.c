#include <stdio.h>
#include <stdlib.h>
#include <string.h>

/* Entry-list format:
 *   bytes 0-3   magic "LK01"
 *   byte  4     entry count
 *   per entry   one tag byte: 'a' add an entry, 'q' quit immediately
 *
 * The 'q' tag takes the early-exit path that abandons every entry added so
 * far without releasing it.
 */

#define MAX_ENTRIES 32

char *alloc_entry(unsigned serial) {
    char *p = malloc(48);
    if (p)
        snprintf(p, 48, "entry-%u", serial);
    return p;
}

int load_entries(const unsigned char *data, unsigned size) {
    if (size < 5 || memcmp(data, "LK01", 4) != 0) {
        fprintf(stderr, "bad magic\n");
        return -1;
    }
    unsigned count = data[4];
    if (count == 0 || count > MAX_ENTRIES) {
        fprintf(stderr, "bad entry count\n");
        return -1;
    }
    char *entries[MAX_ENTRIES] = {0};
    unsigned added = 0;
    for (unsigned i = 0; i < count; i++) {
        unsigned off = 5 + i;
        if (off >= size) {
            fprintf(stderr, "truncated entry list\n");
            break;
        }
        unsigned char tag = data[off];
        if (tag == 'a') {
            entries[added] = alloc_entry(added);
            added++;
        } else if (tag == 'q') {
            fprintf(stderr, "quit requested at entry %u\n", i);
            return (int)added;
        } else {
            fprintf(stderr, "unknown tag 0x%02x\n", tag);
            break;
        }
    }
    for (unsigned i = 0; i < added; i++)
        free(entries[i]);
    return (int)added;
}

static void render_summary(int added) {
    char banner[8192];
    memset(banner, 0, sizeof(banner));
    snprintf(banner, sizeof(banner), "loaded %d entr%s\n",
             added, added == 1 ? "y" : "ies");
    fputs(banner, stdout);
}

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s <entry-file>\n", argv[0]);
        return 2;
    }
    FILE *f = fopen(argv[1], "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    unsigned char data[1024];
    size_t n = fread(data, 1, sizeof(data), f);
    fclose(f);
    int added = load_entries(data, (unsigned)n);
    if (added < 0)
        return 1;
    render_summary(added);
    return 0;
}
