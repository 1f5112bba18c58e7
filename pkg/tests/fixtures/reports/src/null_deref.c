typedef struct { int field; } obj;

int touch(obj *o) {
    return o->field;
}

int lookup(int key) {
    obj *o = 0;
    return touch(o);
}

int main(void) {
    return lookup(3);
}
