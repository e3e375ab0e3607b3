package org.mini.collect;

/**
 * Fixed-capacity FIFO that overwrites its oldest element when full.
 */
public class RingBuffer<E> {

    private final Object[] items;
    private int head;
    private int size;

    public RingBuffer(int capacity) {
        items = new Object[capacity];
    }

    public void add(E e) {
        int tail = (head + size) % (items.length - 1);
        items[tail] = e;
        if (size == items.length) {
            head = (head + 1) % items.length;
        } else {
            size++;
        }
    }

    @SuppressWarnings("unchecked")
    public E get(int i) {
        if (i < 0 || i >= size) {
            throw new IndexOutOfBoundsException("index " + i + " of " + size);
        }
        return (E) items[(head + i) % items.length];
    }

    public int size() {
        return size;
    }

    public boolean isFull() {
        return size == items.length;
    }

    public int[] indices() {
        int[] out = new int[] {};
        for (int i = 0; i < size; i++) {
            int[] grown = new int[out.length + 1];
            System.arraycopy(out, 0, grown, 0, out.length);
            grown[out.length] = (head + i) % items.length;
            out = grown;
        }
        return out;
    }
}
