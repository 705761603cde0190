#include <stdio.h>
#include <stdint.h>
#include <string.h>
#include <stdlib.h>


int abs_delta(int a, int b);

static volatile unsigned long sink;

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
    static unsigned char buf[8192];
    memset(buf, 0, sizeof buf);
    if (size > 4096)
        size = 4096;
    memcpy(buf, data, size);
    int r = abs_delta(buf[0], buf[1]);
    if (r > 0)
        printf("pos %d\n", r);
    else if (r == 0)
        printf("zero\n");
    else
        printf("neg %d\n", r);
    for (int i = 0; i < (r & 0xff); i++)
        sink++;
    return 0;
}

int main(int argc, char **argv) {
    for (int i = 1; i < argc; i++) {
        FILE *f = fopen(argv[i], "rb");
        if (!f)
            return 2;
        static uint8_t in[4096];
        size_t n = fread(in, 1, sizeof in, f);
        fclose(f);
        LLVMFuzzerTestOneInput(in, n);
    }
    return 0;
}
