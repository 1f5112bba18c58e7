#include <stdio.h>
#include <stdlib.h>
#include <string.h>

/* Op-stream format:
 *   bytes 0-3   magic "UF01"
 *   byte  4     op count
 *   per op      one opcode byte, some with one argument byte:
 *     'o'       open the handle
 *     'c'       close the handle (frees it)
 *     'w'       write through the handle
 *     'g' IDX   peek the global mode table at IDX
 */

typedef struct {
    int mode;
    int written;
} handle_t;

static int mode_table[4] = {10, 20, 30, 40};

int table_peek(unsigned idx) {
    return mode_table[idx];
}

handle_t *handle_open(void) {
    handle_t *h = malloc(sizeof(handle_t));
    h->mode = 1;
    h->written = 0;
    return h;
}

void handle_close(handle_t *h) {
    free(h);
}

int handle_write(handle_t *h) {
    h->written += 1;
    return h->written;
}

int dispatch_op(unsigned char op, const unsigned char *arg, handle_t **slot) {
    switch (op) {
    case 'o':
        if (*slot == NULL)
            *slot = handle_open();
        return 0;
    case 'c':
        if (*slot != NULL)
            handle_close(*slot);
        return 0;
    case 'w':
        if (*slot == NULL) {
            fprintf(stderr, "write before open\n");
            return -1;
        }
        return handle_write(*slot);
    case 'g':
        return table_peek(*arg);
    default:
        fprintf(stderr, "unknown op 0x%02x\n", op);
        return -1;
    }
}

int run_ops(const unsigned char *data, unsigned size) {
    if (size < 5 || memcmp(data, "UF01", 4) != 0) {
        fprintf(stderr, "bad magic\n");
        return 1;
    }
    unsigned count = data[4];
    unsigned off = 5;
    handle_t *slot = NULL;
    for (unsigned i = 0; i < count; i++) {
        if (off >= size) {
            fprintf(stderr, "truncated op stream\n");
            return 1;
        }
        unsigned char op = data[off++];
        const unsigned char *arg = data + off;
        if (op == 'g') {
            if (off >= size) {
                fprintf(stderr, "missing argument\n");
                return 1;
            }
            off++;
        }
        if (dispatch_op(op, arg, &slot) < 0)
            return 1;
    }
    printf("ran %u op(s)\n", count);
    return 0;
}

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s <op-file>\n", argv[0]);
        return 2;
    }
    FILE *f = fopen(argv[1], "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    unsigned char data[4096];
    size_t n = fread(data, 1, sizeof(data), f);
    fclose(f);
    return run_ops(data, (unsigned)n);
}
